#include "cellattn/cli.hpp"

int main(int argc, char** argv) { return cellattn::run_cli(argc, argv); }
