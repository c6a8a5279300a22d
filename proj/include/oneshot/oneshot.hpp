#pragma once

// Umbrella header.

#include "oneshot/core/error.hpp"
#include "oneshot/core/geometry.hpp"
#include "oneshot/core/image.hpp"
#include "oneshot/graphext.hpp"
#include "oneshot/mrf.hpp"
#include "oneshot/pattern.hpp"
#include "oneshot/pipeline.hpp"
#include "oneshot/recon.hpp"
#include "oneshot/simulator.hpp"
#include "oneshot/unwrap.hpp"
