// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#include "fewshot/cli/app.hpp"

int main(int argc, char** argv) { return fewshot::cli::run_cli(argc, argv); }
