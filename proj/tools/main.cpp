#include "uvforge/cli_io.hpp"

int main(int argc, char** argv) { return uvforge::run_cli(argc, argv); }
