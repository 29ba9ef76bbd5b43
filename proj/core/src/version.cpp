#include "gridlearn/version.hpp"

#ifndef GRIDLEARN_VERSION
#define GRIDLEARN_VERSION "unknown"
#endif

namespace gridlearn {

const char* version() noexcept { return GRIDLEARN_VERSION; }

}  // namespace gridlearn
