#include "topofuse/cli.hpp"

int main(int argc, char** argv) { return topofuse::run(argc, argv); }
