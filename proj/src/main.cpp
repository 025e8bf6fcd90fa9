#include "ssmcast/cli.hpp"

int main(int argc, char** argv) { return ssmcast::cli::run_cli(argc, argv); }
