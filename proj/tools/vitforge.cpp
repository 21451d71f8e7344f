#include "vitforge/cli.hpp"

int main(int argc, char** argv) { return vitforge::cli::run(argc, argv); }
