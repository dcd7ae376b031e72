#include "fcdm/cli.hpp"

int main(int argc, char** argv) { return fcdm::run_cli(argc, argv); }
