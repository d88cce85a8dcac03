#include "carbq/cli.hpp"

int main(int argc, char** argv) { return carbq::run_cli(argc, argv); }
