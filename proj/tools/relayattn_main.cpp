// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "relayattn/cli.hpp"

int main(int argc, char** argv) { return relayattn::run_cli(argc, argv, std::cout, std::cerr); }
