#pragma once

namespace gridlearn {

/// Project version, with the git description when built from a checkout.
const char* version() noexcept;

}  // namespace gridlearn
