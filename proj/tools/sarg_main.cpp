#include "sarg/cli.hpp"

int main(int argc, char** argv) { return sarg::run_cli(argc, argv); }
