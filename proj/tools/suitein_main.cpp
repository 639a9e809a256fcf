#include "suitein/cli.hpp"

int main(int argc, char** argv) { return suitein::cli::run(argc, argv); }
