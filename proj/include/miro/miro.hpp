#pragma once

#include "miro/error.hpp"
#include "miro/rng.hpp"
#include "miro/digest.hpp"
#include "miro/diffcore.hpp"
#include "miro/rewards.hpp"
#include "miro/synthdata.hpp"
#include "miro/model.hpp"
#include "miro/train.hpp"
#include "miro/sample.hpp"
#include "miro/evalsuite.hpp"
#include "miro/gateway.hpp"
