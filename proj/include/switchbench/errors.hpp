#pragma once

#include <stdexcept>
#include <string>

namespace switchbench {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define SWITCHBENCH_DEFINE_ERROR(Name)                                  \
    class Name : public Error {                                         \
    public:                                                              \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

SWITCHBENCH_DEFINE_ERROR(DimensionMismatch);
SWITCHBENCH_DEFINE_ERROR(NotPositiveDefinite);
SWITCHBENCH_DEFINE_ERROR(EmptyMixture);
SWITCHBENCH_DEFINE_ERROR(AllWeightsDead);
SWITCHBENCH_DEFINE_ERROR(EmptySequence);
SWITCHBENCH_DEFINE_ERROR(TooLarge);
SWITCHBENCH_DEFINE_ERROR(SingularSufficientStatistics);
SWITCHBENCH_DEFINE_ERROR(MissingClass);
SWITCHBENCH_DEFINE_ERROR(InvalidParameter);
SWITCHBENCH_DEFINE_ERROR(InvalidLabel);
SWITCHBENCH_DEFINE_ERROR(ParseError);
SWITCHBENCH_DEFINE_ERROR(MissingFile);
SWITCHBENCH_DEFINE_ERROR(DuplicatePath);
SWITCHBENCH_DEFINE_ERROR(NonMonotoneFrames);
SWITCHBENCH_DEFINE_ERROR(UnknownLabel);
SWITCHBENCH_DEFINE_ERROR(InvalidSpec);
SWITCHBENCH_DEFINE_ERROR(InvalidGrid);
SWITCHBENCH_DEFINE_ERROR(EmptyMatrix);
SWITCHBENCH_DEFINE_ERROR(IoError);

#undef SWITCHBENCH_DEFINE_ERROR

}  // namespace switchbench
