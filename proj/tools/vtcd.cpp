#include "vtcd/cli.hpp"

int main(int argc, char** argv) { return vtcd::run_cli(argc, argv); }
