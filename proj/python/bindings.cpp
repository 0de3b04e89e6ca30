#include <pybind11/pybind11.h>

namespace py = pybind11;

PYBIND11_MODULE(_uvforge, m) {
    m.doc() = "Morphable-model fitting, UV completion and pose synthesis";
    m.attr("__version__") = "0.1.0";
}
