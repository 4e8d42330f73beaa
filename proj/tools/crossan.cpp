// SPDX-License-Identifier: Apache-2.0
#include "crossan/cli.hpp"

int main(int argc, char** argv) { return crossan::cli::run(argc, argv); }
