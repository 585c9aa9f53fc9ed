#include "spur/cli.hpp"

int main(int argc, char** argv) { return spur::cli::run(argc, argv); }
