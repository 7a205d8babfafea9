#pragma once

#include "disco/audit.hpp"
#include "disco/cmadiff.hpp"
#include "disco/embedder.hpp"
#include "disco/error.hpp"
#include "disco/eval.hpp"
#include "disco/image.hpp"
#include "disco/mls.hpp"
#include "disco/nn.hpp"
#include "disco/rng.hpp"
#include "disco/scenegraph.hpp"
#include "disco/slvae.hpp"
#include "disco/synthdata.hpp"
#include "disco/tensor.hpp"
#include "disco/trainer.hpp"
