#include "dplx/cli.hpp"

int main(int argc, char** argv) { return dplx::cli::dispatch(argc, argv); }
