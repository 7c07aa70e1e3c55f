#include "dfmvi/cli.hpp"

int main(int argc, char** argv) { return dfmvi::run_cli(argc, argv); }
