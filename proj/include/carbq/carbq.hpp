#pragma once

// Everything at once.

#include "carbq/analytics.hpp"
#include "carbq/cli.hpp"
#include "carbq/components.hpp"
#include "carbq/curation_service.hpp"
#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"
#include "carbq/metrics.hpp"
#include "carbq/morphology.hpp"
#include "carbq/nn/serialize.hpp"
#include "carbq/nn/train.hpp"
#include "carbq/nn/unet.hpp"
#include "carbq/random.hpp"
#include "carbq/synth.hpp"
