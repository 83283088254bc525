// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "qattack/attack.hpp"
#include "qattack/autograd.hpp"
#include "qattack/binary_io.hpp"
#include "qattack/dataset.hpp"
#include "qattack/errors.hpp"
#include "qattack/harness.hpp"
#include "qattack/quantlinear.hpp"
#include "qattack/rng.hpp"
#include "qattack/tensor.hpp"
#include "qattack/vit.hpp"
