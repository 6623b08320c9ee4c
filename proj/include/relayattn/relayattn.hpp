// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "relayattn/attention.hpp"
#include "relayattn/costmodel.hpp"
#include "relayattn/errors.hpp"
#include "relayattn/kvcache.hpp"
#include "relayattn/model.hpp"
#include "relayattn/numerics.hpp"
#include "relayattn/serving.hpp"
#include "relayattn/verification.hpp"
#include "relayattn/tensor.hpp"
