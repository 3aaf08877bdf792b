#include "c2v/cli.hpp"

int main(int argc, char** argv) { return c2v::run(argc, argv); }
