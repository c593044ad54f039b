// Everything in one include.
#pragma once

#include "mnx/bench.hpp"
#include "mnx/config_json.hpp"
#include "mnx/cost.hpp"
#include "mnx/data.hpp"
#include "mnx/detections_io.hpp"
#include "mnx/image.hpp"
#include "mnx/metrics.hpp"
#include "mnx/model.hpp"
#include "mnx/selftest.hpp"
#include "mnx/train.hpp"
#include "mnx/weights_io.hpp"
