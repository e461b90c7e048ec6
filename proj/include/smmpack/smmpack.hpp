#pragma once

#include "smmpack/bench.hpp"
#include "smmpack/bytes.hpp"
#include "smmpack/capsule.hpp"
#include "smmpack/cipher.hpp"
#include "smmpack/demo.hpp"
#include "smmpack/error.hpp"
#include "smmpack/packer.hpp"
#include "smmpack/pe_image.hpp"
#include "smmpack/platform.hpp"
#include "smmpack/scenario.hpp"
#include "smmpack/sha256.hpp"
#include "smmpack/simulator.hpp"
#include "smmpack/synth.hpp"
#include "smmpack/tpm.hpp"
