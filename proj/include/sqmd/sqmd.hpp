#pragma once

#include "sqmd/errors.hpp"
#include "sqmd/matrix.hpp"
#include "sqmd/rng.hpp"
#include "sqmd/nn.hpp"
#include "sqmd/protocol.hpp"
#include "sqmd/server.hpp"
#include "sqmd/client.hpp"
#include "sqmd/data.hpp"
#include "sqmd/partition.hpp"
#include "sqmd/config.hpp"
#include "sqmd/record.hpp"
#include "sqmd/simulation.hpp"
#include "sqmd/cli.hpp"
