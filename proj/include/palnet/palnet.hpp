#pragma once

// Umbrella header: the full landmark-localization toolkit.

#include "palnet/common.hpp"
#include "palnet/evaluation.hpp"
#include "palnet/geometry.hpp"
#include "palnet/kdtree.hpp"
#include "palnet/landmarks.hpp"
#include "palnet/mesh_io.hpp"
#include "palnet/network.hpp"
#include "palnet/patching.hpp"
#include "palnet/pipeline.hpp"
#include "palnet/registration.hpp"
#include "palnet/rng.hpp"
#include "palnet/schema.hpp"
#include "palnet/synthetic.hpp"
#include "palnet/training.hpp"
