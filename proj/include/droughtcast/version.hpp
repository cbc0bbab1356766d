#pragma once

namespace droughtcast {

inline const char* kVersionTag = "droughtcast-0.1.0";

}  // namespace droughtcast
