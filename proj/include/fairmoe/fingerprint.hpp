// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace fairmoe {

// Records a hash of every discrete selection (top-k / capacity masks) made
// during a forward pass. The finite-difference checker compares fingerprints
// at perturbed points to detect when a perturbation crossed a selection
// boundary, which makes the loss non-differentiable at that parameter.
class SelectionFingerprint {
public:
  static SelectionFingerprint& current() {
    thread_local SelectionFingerprint fp;
    return fp;
  }

  void reset() { hash_ = 0xcbf29ce484222325ull; }

  void note(std::uint64_t v) {
    hash_ ^= v;
    hash_ *= 0x100000001b3ull;
    hash_ ^= hash_ >> 29;
  }

  std::uint64_t value() const { return hash_; }

private:
  std::uint64_t hash_ = 0xcbf29ce484222325ull;
};

}  // namespace fairmoe
