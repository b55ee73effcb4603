#pragma once

namespace distill3d {

extern const int kMcEdgeTable[256];
extern const int kMcTriTable[256][16];

}  // namespace distill3d
