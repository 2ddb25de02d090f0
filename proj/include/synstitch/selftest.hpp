#pragma once

#include <string>
#include <vector>

namespace synstitch {

struct SelfCheck {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Fast property checks over every module (well under a minute on one core):
/// diffusion algebra, gradient check, zero-conv identity, warp composition,
/// metric identities, RANSAC recovery. A check that throws is reported as failed.
std::vector<SelfCheck> run_selftest();

}  // namespace synstitch
