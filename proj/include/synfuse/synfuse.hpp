#pragma once

#include "synfuse/attention.hpp"
#include "synfuse/bert.hpp"
#include "synfuse/bleu.hpp"
#include "synfuse/bpe.hpp"
#include "synfuse/checkpoint.hpp"
#include "synfuse/config.hpp"
#include "synfuse/error.hpp"
#include "synfuse/harness.hpp"
#include "synfuse/optim.hpp"
#include "synfuse/rng.hpp"
#include "synfuse/syntax.hpp"
#include "synfuse/tensor.hpp"
#include "synfuse/text.hpp"
#include "synfuse/toy_data.hpp"
#include "synfuse/transformer.hpp"
