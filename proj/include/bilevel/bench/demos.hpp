#pragma once

#include <string>
#include <vector>

namespace bilevel::bench {

/// quadratic, logreg, logreg-darts-variants, continual, lq-constrained.
const std::vector<std::string>& demo_names();

/// INI text of a bundled demo; std::invalid_argument for an unknown name.
const std::string& demo_config(const std::string& name);

}  // namespace bilevel::bench
