// Umbrella header.
#pragma once

#include "winddispatch/approximator.hpp"
#include "winddispatch/calibrate.hpp"
#include "winddispatch/dispatch.hpp"
#include "winddispatch/power.hpp"
#include "winddispatch/random.hpp"
#include "winddispatch/sde.hpp"
#include "winddispatch/synth.hpp"
#include "winddispatch/util.hpp"
