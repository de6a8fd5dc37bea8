#pragma once

#include <stdexcept>
#include <string>

namespace dwcca {

// Errors are grouped by the contract they enforce rather than by module.
// Each carries a human-readable message naming the offending quantity.

#define DWCCA_DEFINE_ERROR(Name)                                         \
  struct Name : std::runtime_error {                                     \
    explicit Name(const std::string& msg) : std::runtime_error(msg) {}   \
  }

// linalg
DWCCA_DEFINE_ERROR(DimensionMismatch);
DWCCA_DEFINE_ERROR(NotSymmetric);
DWCCA_DEFINE_ERROR(NotPositiveDefinite);
DWCCA_DEFINE_ERROR(NoConvergence);
DWCCA_DEFINE_ERROR(DegenerateInput);
DWCCA_DEFINE_ERROR(NonFiniteValue);

// diffops
DWCCA_DEFINE_ERROR(SingularFactor);
DWCCA_DEFINE_ERROR(DegenerateClass);

// dwcca layer
DWCCA_DEFINE_ERROR(DegenerateBatch);
DWCCA_DEFINE_ERROR(FrozenState);
DWCCA_DEFINE_ERROR(StaleTape);

// nn
DWCCA_DEFINE_ERROR(ShapeMismatch);
DWCCA_DEFINE_ERROR(ConfigError);

// train
DWCCA_DEFINE_ERROR(NonFiniteGradient);
DWCCA_DEFINE_ERROR(InfeasibleStratification);
DWCCA_DEFINE_ERROR(ClassCountMismatch);

// data
DWCCA_DEFINE_ERROR(FormatError);
DWCCA_DEFINE_ERROR(IoError);
DWCCA_DEFINE_ERROR(InvalidSpec);
DWCCA_DEFINE_ERROR(InfeasibleSplit);

// analysis
DWCCA_DEFINE_ERROR(LengthMismatch);
DWCCA_DEFINE_ERROR(EmptyTrainingSet);

#undef DWCCA_DEFINE_ERROR

}  // namespace dwcca
