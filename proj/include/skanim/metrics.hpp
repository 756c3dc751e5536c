// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "skanim/raster.hpp"

namespace skanim {

// Desk-scale proxies for the three evaluation axes. Appearance and temporal
// scores are cosines over 8x8-pooled, mean-centered frame vectors; motion is
// the Pearson correlation of ink-centroid tracks. Absolute values are not
// comparable to CLIP/X-CLIP numbers; only orderings and deltas are meaningful.
struct EvalReport {
    double appearance_alignment = 0.0;  // in [-1, 1]
    double motion_alignment     = 0.0;
    double temporal_consistency = 0.0;
    std::vector<std::array<double, 2>> track;  // per-frame ink centroid (x, y)
};

// Mean over frames of cosine(pool(frame), pool(sketch)).
double appearance_alignment(const RasterVideo& frames, const RasterFrame& sketch);

// Mean cosine over consecutive frame pairs. Requires F >= 2.
double temporal_consistency(const RasterVideo& frames);

// Ink-mass centroid per frame, canvas coordinates in [0, 1].
std::vector<std::array<double, 2>> ink_centroid_track(const RasterVideo& frames);

// (corr_x + corr_y)/2 of mean-centered tracks; a degenerate (constant) track
// on an axis contributes 0 for that axis.
double motion_alignment(const RasterVideo& frames, const std::vector<std::array<double, 2>>& ref_track);
double motion_alignment_tracks(const std::vector<std::array<double, 2>>& track,
                               const std::vector<std::array<double, 2>>& ref_track);

// Pearson correlation averaged over the axes where the reference track
// actually moves; used for end-to-end track fidelity checks.
double centroid_track_pearson(const std::vector<std::array<double, 2>>& track,
                              const std::vector<std::array<double, 2>>& ref_track);

void write_track_csv(const std::vector<std::array<double, 2>>& track, const std::string& path);
std::vector<std::array<double, 2>> read_track_csv(const std::string& path);

}  // namespace skanim
