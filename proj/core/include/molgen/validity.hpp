// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

// Semantic SMILES checker used to audit generated molecules: valence
// accounting, ring-closure pairing, ring-size limits, and aromatic-ring
// well-formedness at the token level.  Deliberately independent of the
// grammar machinery: it scans raw text and knows nothing about production
// rules, so it can serve as the oracle for the generator's validity claim.

namespace molgen::oracle {

struct Violation {
  std::string kind;      // "valence", "ring-too-small", "unclosed-ring", ...
  std::size_t position;  // byte offset into the input
  std::string message;
};

struct ValidityReport {
  bool valid = false;
  std::vector<Violation> violations;
  int atom_count = 0;
  int aromatic_ring_count = 0;
  std::vector<int> ring_sizes;  // one entry per ring-closure pair
};

struct OracleLimits {
  int min_ring_size = 3;
  int max_ring_size = 8;
};

/// Never throws: malformed input yields valid=false with violations.
ValidityReport check(std::string_view smiles, const OracleLimits& limits = {});

/// Number of closed rings made entirely of lowercase aromatic atoms.
int count_aromatic_rings(std::string_view smiles);

}  // namespace molgen::oracle
