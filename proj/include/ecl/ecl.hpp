// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "ecl/checkpoint.hpp"
#include "ecl/collab.hpp"
#include "ecl/config.hpp"
#include "ecl/core.hpp"
#include "ecl/expertnet.hpp"
#include "ecl/losses.hpp"
#include "ecl/ltdata.hpp"
#include "ecl/metrics.hpp"
