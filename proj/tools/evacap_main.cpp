// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "evacap/cli.hpp"

int main(int argc, char** argv) { return evacap::cli::cli_dispatch(argc, argv, std::cout, std::cerr); }
