#pragma once

#include "diffkd/ablation.hpp"
#include "diffkd/checkpoint.hpp"
#include "diffkd/config.hpp"
#include "diffkd/data.hpp"
#include "diffkd/denoiser.hpp"
#include "diffkd/diffkd.hpp"
#include "diffkd/distance.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/feature_adapters.hpp"
#include "diffkd/metrics.hpp"
#include "diffkd/models.hpp"
#include "diffkd/noise_schedule.hpp"
#include "diffkd/trainer.hpp"
#include "diffkd/viz.hpp"
