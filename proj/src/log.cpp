// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/log.hpp"

#include <iostream>

namespace mtlora::log {

namespace {
thread_local Level g_level = Level::kWarning;

const char* tag(Level level) {
  switch (level) {
    case Level::kDebug: return "debug";
    case Level::kInfo: return "info";
    case Level::kWarning: return "warning";
    case Level::kError: return "error";
    case Level::kOff: break;
  }
  return "";
}
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void write(Level level, std::string_view message) {
  if (level < g_level || level == Level::kOff) return;
  std::clog << "[mtlora " << tag(level) << "] " << message << '\n';
}

}  // namespace mtlora::log
