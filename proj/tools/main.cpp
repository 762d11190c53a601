// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/cli.hpp"

int main(int argc, char** argv) { return mhaseg::cli::run(argc, argv); }
