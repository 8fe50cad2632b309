#include "cli.hpp"

int main(int argc, char** argv) { return motionbook::cli::run(argc, argv); }
