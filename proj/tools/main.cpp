#include "lgmcr/cli.hpp"

int main(int argc, char** argv) { return lgmcr::run_cli(argc, argv); }
