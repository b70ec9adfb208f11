#pragma once

#include "crowdnav/checkpoint.hpp"
#include "crowdnav/config.hpp"
#include "crowdnav/errors.hpp"
#include "crowdnav/eval.hpp"
#include "crowdnav/geometry.hpp"
#include "crowdnav/mdp.hpp"
#include "crowdnav/optim.hpp"
#include "crowdnav/policy_net.hpp"
#include "crowdnav/ppo.hpp"
#include "crowdnav/rng.hpp"
#include "crowdnav/rollout.hpp"
#include "crowdnav/scenarios.hpp"
#include "crowdnav/server.hpp"
#include "crowdnav/sim_core.hpp"
#include "crowdnav/trainer.hpp"
