#pragma once

namespace vp {

// Wet portion of an axis-aligned rectangle clipped against the interior of
// the ellipse y^2/ay^2 + z^2/az^2 <= 1: area, centroid and raw second
// moments in face coordinates. Exposed for the cut-cell geometry unit tests.
struct WetFace {
    double area = 0.0;
    double cy = 0.0, cz = 0.0;
    double syy = 0.0, szz = 0.0, syz = 0.0;  // integrals of y^2, z^2, yz
};

WetFace ellipse_rect_moments(double ay, double az, double y0, double y1, double z0, double z1);

}  // namespace vp
