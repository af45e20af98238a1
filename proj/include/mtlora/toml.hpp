// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>

#include "json.hpp"

namespace mtlora {

// Parses the subset of TOML used by run configs: [table] and [a.b] headers,
// key = value pairs with bare or quoted keys, strings, integers, floats,
// booleans and (possibly multi-line) arrays of those. Throws ConfigError with
// the offending line number.
nlohmann::json parse_toml(std::string_view text);

}  // namespace mtlora
