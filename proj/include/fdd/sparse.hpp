// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fdd/channel.hpp"

#include <vector>

namespace fdd {

/// Array responses on a grid that is uniform in sin(theta).
struct AngularDictionary {
    std::vector<double> grid;  // radians
    CMatrix atoms;             // M x G, column g = a_t(grid[g])

    std::size_t size() const { return grid.size(); }
    /// X^H A: the atoms as seen through the pilots (L x G).
    CMatrix project(const PilotMatrix& pilots) const;
};

/// G points uniform in sin(theta) over [low, high]. Both endpoints are included, except for the full
/// [-90, 90] degree range where they alias and the grid is half-open (sin theta = -1 + 2g/G).
AngularDictionary build_dictionary(const ArrayConfig& cfg, std::size_t grid_size, double low = deg_to_rad(-90.0),
                                   double high = deg_to_rad(90.0));

struct OmpResult {
    std::vector<std::size_t> support;
    std::vector<cdouble> coefficients;
    /// Residual norm before the first and after every iteration.
    std::vector<double> residual_norms;
    CMatrix residual;
};

/// Orthogonal matching pursuit on y (n x 1) against `sensing` (n x G) for exactly `sparsity` picks.
/// Each pick maximizes |s_g^H r| / ||s_g|| (ties go to the lowest index), then all selected
/// coefficients are re-fitted by least squares.
OmpResult omp(const CMatrix& y, const CMatrix& sensing, std::size_t sparsity);

struct OmpChannelEstimate {
    CMatrix h;                  // M x 1
    std::vector<cdouble> gains; // alpha_hat, so that h = (1/sqrt(lp)) sum gains[l] a_t(aods[l])
    std::vector<double> aods;
};

/// Estimates h from y = h^H X + z by running OMP on y^H against the pilot-projected dictionary.
/// `projected` may be passed in to avoid recomputing dict.project(pilots) per call.
OmpChannelEstimate estimate_channel_omp(const ReceivedPilots& rx, const PilotMatrix& pilots,
                                        const AngularDictionary& dict, std::size_t lp,
                                        const CMatrix* projected = nullptr);

}  // namespace fdd
