#pragma once

// Scalar selection. The library compiles in two flavours that differ only in
// the scalar type: float for training/inference, double for finite-difference
// gradient verification. Each flavour lives in its own inline namespace so
// both can be linked into the same binary without symbol clashes.
#if defined(SARTM_SCALAR_F64)
#define SARTM_NS_BEGIN \
  namespace sartm {    \
  inline namespace f64 {
#else
#define SARTM_NS_BEGIN \
  namespace sartm {    \
  inline namespace f32 {
#endif
#define SARTM_NS_END \
  }                  \
  }

SARTM_NS_BEGIN

#if defined(SARTM_SCALAR_F64)
using Scalar = double;
#else
using Scalar = float;
#endif

SARTM_NS_END
