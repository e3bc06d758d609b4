#pragma once

// Umbrella header for the CHBC library.

#include "chbc/cbc.hpp"
#include "chbc/data.hpp"
#include "chbc/error.hpp"
#include "chbc/hierarchy.hpp"
#include "chbc/io.hpp"
#include "chbc/metrics.hpp"
#include "chbc/mge.hpp"
#include "chbc/model.hpp"
#include "chbc/tensor.hpp"
#include "chbc/trainer.hpp"
