/*
 * Copyright 2026 The ulie Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <atomic>
#include <cstdint>

namespace ulie {

// Process-wide operation tallies. Tests and benchmarks use them to make
// structural claims ("no exponentials after caching") without timing.
struct OpCounters {
  std::atomic<std::uint64_t> expm_calls{0};
  std::atomic<std::uint64_t> row_normalizations{0};
  std::atomic<std::uint64_t> instance_normalizations{0};

  void reset() {
    expm_calls = 0;
    row_normalizations = 0;
    instance_normalizations = 0;
  }
};

inline OpCounters& counters() {
  static OpCounters c;
  return c;
}

}  // namespace ulie
