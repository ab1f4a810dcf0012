#include "egot2/cli.hpp"

int main(int argc, char** argv) { return egot2::cli::run(argc, argv); }
