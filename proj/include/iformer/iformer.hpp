#pragma once

// Single include for the whole library.

#include "iformer/common.hpp"
#include "iformer/tensor.hpp"
#include "iformer/tape.hpp"
#include "iformer/nn.hpp"
#include "iformer/mixer.hpp"
#include "iformer/model.hpp"
#include "iformer/analysis.hpp"
#include "iformer/io.hpp"
#include "iformer/train.hpp"
#include "iformer/gradcheck.hpp"
