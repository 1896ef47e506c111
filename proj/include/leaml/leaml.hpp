#pragma once

// Umbrella header. The remote captioner (leaml/remote.hpp) is separate because
// it pulls in an HTTP client.

#include "leaml/checkpoint.hpp"
#include "leaml/config.hpp"
#include "leaml/dataset.hpp"
#include "leaml/decode.hpp"
#include "leaml/error.hpp"
#include "leaml/kernels.hpp"
#include "leaml/losses.hpp"
#include "leaml/metrics.hpp"
#include "leaml/model.hpp"
#include "leaml/ops.hpp"
#include "leaml/optim.hpp"
#include "leaml/pipeline.hpp"
#include "leaml/rng.hpp"
#include "leaml/select.hpp"
#include "leaml/sequence.hpp"
#include "leaml/synthetic.hpp"
#include "leaml/tensor.hpp"
#include "leaml/vocab.hpp"
