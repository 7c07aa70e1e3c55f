#pragma once

#include "dfmvi/errors.hpp"
#include "dfmvi/linalg.hpp"
#include "dfmvi/random.hpp"
#include "dfmvi/panel.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/statespace.hpp"
#include "dfmvi/vi.hpp"
#include "dfmvi/gibbs.hpp"
#include "dfmvi/forecast.hpp"
#include "dfmvi/sim.hpp"
#include "dfmvi/cli.hpp"
