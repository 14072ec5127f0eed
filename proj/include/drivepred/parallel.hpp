#pragma once

namespace drivepred {

// Data-parallel kernels (GA population evaluation, batch gradients, per-anchor
// extraction) come in two flavors. The serial flavor is the reference the
// tests compare against; both must produce identical results because every
// slot is computed independently and reduced in a fixed order.
enum class ExecMode { serial, parallel };

}  // namespace drivepred
