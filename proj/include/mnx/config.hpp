// Build-time scalar selection. The library computes in `Real`, f32 unless
// MNX_REAL is defined. A double build lives in its own inline namespace so
// both can be linked into one program (the gradient suite uses the double
// build to keep finite-difference noise far below the tolerance).
#pragma once

#ifndef MNX_REAL
#define MNX_REAL float
#define MNX_ABI f32
#endif

#ifndef MNX_ABI
#error "MNX_ABI must name the inline namespace when MNX_REAL is overridden"
#endif

namespace mnx::inline MNX_ABI {

using Real = MNX_REAL;

}  // namespace mnx
