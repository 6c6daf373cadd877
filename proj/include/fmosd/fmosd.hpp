// Umbrella header: one-shot anatomical landmark detection from a single
// labeled template image, via frozen dense descriptors, trainable global and
// local decoders, and coarse-to-fine bidirectional matching.

#pragma once

#include "fmosd/backbone.hpp"
#include "fmosd/config.hpp"
#include "fmosd/core.hpp"
#include "fmosd/decoders.hpp"
#include "fmosd/evaldata.hpp"
#include "fmosd/image_io.hpp"
#include "fmosd/matching.hpp"
#include "fmosd/nn.hpp"
#include "fmosd/pipeline.hpp"
#include "fmosd/rng.hpp"
#include "fmosd/simloss.hpp"
#include "fmosd/synth.hpp"
