#pragma once

// Umbrella header: attention with lookahead-gated keys in its three
// equivalent forms (token-by-token, whole-sequence, tiled), the decoding
// cache, and multi-head composition. The self-check / report harness lives
// in castle/verify.hpp, which is not pulled in here because it additionally
// needs the single-header nlohmann json.hpp on the include path.

#include "castle/blockwise.hpp"
#include "castle/concurrency.hpp"
#include "castle/flops.hpp"
#include "castle/infer.hpp"
#include "castle/masks.hpp"
#include "castle/matrix.hpp"
#include "castle/multihead.hpp"
#include "castle/numeric.hpp"
#include "castle/parallel.hpp"
#include "castle/recurrent.hpp"
#include "castle/rng.hpp"
