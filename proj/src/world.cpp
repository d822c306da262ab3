#include "hmcface/world.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hmcface/decoder.hpp"

namespace hmc::world {

namespace {

constexpr double kPi = 3.14159265358979323846;

// face extent in mm: width 150, height 180
constexpr double kHalfW = 75.0;
constexpr double kHalfH = 90.0;
constexpr double kDomeZ = 42.0;
constexpr double kDomeSx = 52.0;
constexpr double kDomeSy = 68.0;

constexpr double kEyeX = 24.0, kEyeY = 30.0;
constexpr double kMouthY = -38.0;
constexpr double kBrowY = 46.0;

double dome_z(double x, double y) {
    return kDomeZ * std::exp(-(x * x / (2 * kDomeSx * kDomeSx) + y * y / (2 * kDomeSy * kDomeSy)));
}

double gauss2(double dx, double dy, double sx, double sy) {
    return std::exp(-(dx * dx / (2 * sx * sx) + dy * dy / (2 * sy * sy)));
}

void grid_xy(int idx, double& x, double& y) {
    const int iy = idx / kGridN, ix = idx % kGridN;
    x = -kHalfW + 2 * kHalfW * ix / (kGridN - 1);
    y = -kHalfH + 2 * kHalfH * iy / (kGridN - 1);
}

int nearest_grid_vertex(double x, double y, const std::set<int>& taken) {
    int best = -1;
    double best_d = 1e18;
    for (int i = 0; i < kFaceVerts; ++i) {
        if (taken.count(i)) continue;
        double gx, gy;
        grid_xy(i, gx, gy);
        const double d = (gx - x) * (gx - x) + (gy - y) * (gy - y);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

int grid_index(int ix, int iy) { return iy * kGridN + ix; }

int mirror_grid_index(int idx) {
    const int iy = idx / kGridN, ix = idx % kGridN;
    return grid_index(kGridN - 1 - ix, iy);
}

// Disc layout: 0 center, 1..8 inner ring, 9..24 outer ring, angles measured
// from +x counterclockwise.
constexpr double kDiscInnerR = 3.5;
constexpr double kDiscOuterR = 8.0;
constexpr double kDiscBulge = 2.5;
constexpr double kEyePivotDepth = 9.0;

void disc_offsets(int k, double& dx, double& dy, double& bulge) {
    if (k == 0) {
        dx = dy = 0;
        bulge = kDiscBulge;
        return;
    }
    double r, ang;
    if (k <= 8) {
        r = kDiscInnerR;
        ang = 2 * kPi * (k - 1) / 8;
    } else {
        r = kDiscOuterR;
        ang = 2 * kPi * (k - 9) / 16;
    }
    dx = r * std::cos(ang);
    dy = r * std::sin(ang);
    bulge = kDiscBulge * (1.0 - (r * r) / (kDiscOuterR * kDiscOuterR * 1.15));
}

int mirror_disc_vertex(int k) {
    // angle theta -> pi - theta within each ring
    if (k == 0) return 0;
    if (k <= 8) {
        const int j = k - 1;
        return 1 + ((4 - j) % 8 + 8) % 8;
    }
    const int j = k - 9;
    return 9 + ((8 - j) % 16 + 16) % 16;
}

struct BumpField {
    struct Bump {
        double cx, cy, sx, sy;
        double amp[3];
    };
    std::vector<Bump> bumps;

    void eval(double x, double y, double* out) const {
        out[0] = out[1] = out[2] = 0;
        for (const auto& b : bumps) {
            const double w = gauss2(x - b.cx, y - b.cy, b.sx, b.sy);
            out[0] += w * b.amp[0];
            out[1] += w * b.amp[1];
            out[2] += w * b.amp[2];
        }
    }
};

BumpField sample_bump_field(Rng& rng, int count, double max_amp) {
    BumpField f;
    for (int i = 0; i < count; ++i) {
        BumpField::Bump b;
        b.cx = rng.uniform(-kHalfW, kHalfW);
        b.cy = rng.uniform(-kHalfH, kHalfH);
        b.sx = rng.uniform(14.0, 32.0);
        b.sy = rng.uniform(14.0, 32.0);
        for (double& a : b.amp) a = rng.uniform(-max_amp, max_amp);
        f.bumps.push_back(b);
    }
    return f;
}

// Blend basis templates evaluated on template-space coordinates. Unit
// activation displacements in mm.
void basis_displacement(int k, double x, double y, double* d) {
    d[0] = d[1] = d[2] = 0;
    switch (k) {
        case kJaw: {
            // lower face drops and recedes
            const double ramp = 1.0 / (1.0 + std::exp(-(-25.0 - y) / 11.0));
            const double lateral = std::exp(-x * x / (2 * 55.0 * 55.0));
            d[1] = -16.0 * ramp * lateral;
            d[2] = -4.5 * ramp * lateral;
            break;
        }
        case kSmileL:
        case kSmileR: {
            const double sx = k == kSmileL ? -1.0 : 1.0;
            const double w = gauss2(x - sx * 26.0, y + 36.0, 13.0, 15.0);
            d[0] = sx * 4.5 * w;
            d[1] = 7.0 * w;
            d[2] = 2.0 * w;
            break;
        }
        case kBrowL:
        case kBrowR: {
            const double sx = k == kBrowL ? -1.0 : 1.0;
            const double w = gauss2(x - sx * kEyeX, y - kBrowY, 13.0, 7.0);
            d[1] = 7.5 * w;
            d[2] = 1.5 * w;
            break;
        }
        case kEyeCloseL:
        case kEyeCloseR: {
            const double sx = k == kEyeCloseL ? -1.0 : 1.0;
            // lid band above the eye sweeps down over it
            const double w = gauss2(x - sx * kEyeX, y - (kEyeY + 8.0), 11.0, 7.5);
            d[1] = -10.0 * w;
            d[2] = 2.5 * w;
            break;
        }
        case kPucker: {
            const double dx = x, dy = y - kMouthY;
            const double r = std::sqrt(dx * dx + dy * dy) + 1e-9;
            const double w = std::exp(-r * r / (2 * 16.0 * 16.0));
            d[0] = -6.0 * w * dx / r;
            d[1] = -3.5 * w * dy / r;
            d[2] = 5.0 * w;
            break;
        }
        default:
            break;
    }
}

struct LandmarkLayout {
    std::vector<int> indices;        // 96 vertex ids
    std::vector<int> mirror;         // landmark-level pairing under x flip
    std::array<int, 4> mouth_probe;  // corner L, corner R, upper, lower
};

// Lips x24, eye contours 2x16 (disc outer rings), brows 2x10, jaw x20.
// Grid-based sets are placed as mirror pairs on the right half so the
// landmark pairing under horizontal flips maps onto exact vertex mirrors.
LandmarkLayout build_landmarks() {
    LandmarkLayout out;
    out.indices.assign(kNumLandmarks, -1);
    out.mirror.assign(kNumLandmarks, -1);
    std::set<int> taken;

    // nearest grid vertex with a free mirror partner; claims both
    auto place_pair = [&taken](double x, double y, int& mirrored) {
        int best = -1;
        double best_d = 1e18;
        for (int i = 0; i < kFaceVerts; ++i) {
            const int mi = mirror_grid_index(i);
            if (taken.count(i) || taken.count(mi)) continue;
            double gx, gy;
            grid_xy(i, gx, gy);
            const double d = (gx - x) * (gx - x) + (gy - y) * (gy - y);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        if (best < 0) throw HmcError("landmark layout exhausted the grid");
        mirrored = mirror_grid_index(best);
        taken.insert(best);
        taken.insert(mirrored);
        return best;
    };

    // lips: 24 ring points on the mouth ellipse, half-step offset so no
    // point sits on the midline; j pairs with (11-j) mod 24
    const double lips_rx = 20.0, lips_ry = 11.0;
    for (int j : {0, 1, 2, 3, 4, 5, 18, 19, 20, 21, 22, 23}) {
        const double ang = 2 * kPi * (j + 0.5) / 24;
        int midx = -1;
        const int idx =
            place_pair(lips_rx * std::cos(ang), kMouthY + lips_ry * std::sin(ang), midx);
        const int jm = ((11 - j) % 24 + 24) % 24;
        out.indices[j] = idx;
        out.indices[jm] = midx;
        out.mirror[j] = jm;
        out.mirror[jm] = j;
    }

    // eye contours: disc outer rings, left then right
    for (int j = 0; j < 16; ++j) {
        out.indices[24 + j] = kDiscLStart + 9 + j;
        out.indices[40 + j] = kDiscRStart + 9 + j;
        const int mk = mirror_disc_vertex(9 + j) - 9;
        out.mirror[24 + j] = 40 + mk;
        out.mirror[40 + j] = 24 + mk;
    }

    // brows: 10 each, arcs above the eyes, left block then right block
    for (int j = 0; j < 10; ++j) {
        const double t = j / 9.0;
        const double x = 10.0 + 28.0 * t;
        const double y = kBrowY + 6.0 * std::sin(kPi * t);
        int midx = -1;
        const int idx = place_pair(x, y, midx);  // right brow
        out.indices[66 + j] = idx;
        out.indices[56 + j] = midx;
        out.mirror[66 + j] = 56 + j;
        out.mirror[56 + j] = 66 + j;
    }

    // jaw: 20 along the lower face outline, right side from chin to ear
    const double jaw_rx = 68.0, jaw_ry = 84.0;
    for (int j = 0; j < 10; ++j) {
        const double ang = -kPi / 2 + (kPi * 0.44) * (j + 0.5) / 10.0;
        int midx = -1;
        const int idx = place_pair(jaw_rx * std::cos(ang), jaw_ry * std::sin(ang), midx);
        out.indices[86 + j] = idx;
        out.indices[85 - j] = midx;
        out.mirror[86 + j] = 85 - j;
        out.mirror[85 - j] = 86 + j;
    }

    for (int j = 0; j < kNumLandmarks; ++j)
        if (out.indices[j] < 0) throw HmcError("landmark layout incomplete");

    // mouth probe vertices: corners as an exact mirror pair, then the lip
    // ring top and bottom
    std::set<int> none;
    const int corner_r = nearest_grid_vertex(lips_rx, kMouthY, none);
    const int top = nearest_grid_vertex(0.0, kMouthY + lips_ry, none);
    const int bottom = nearest_grid_vertex(0.0, kMouthY - lips_ry, none);
    out.mouth_probe = {mirror_grid_index(corner_r), corner_r, top, bottom};
    return out;
}

const LandmarkLayout& landmark_layout() {
    static const LandmarkLayout layout = build_landmarks();
    return layout;
}

std::vector<int> build_vertex_mirror() {
    std::vector<int> perm(kNumVerts);
    for (int i = 0; i < kFaceVerts; ++i) perm[i] = mirror_grid_index(i);
    for (int k = 0; k < kDiscVerts; ++k) {
        perm[kDiscLStart + k] = kDiscRStart + mirror_disc_vertex(k);
        perm[kDiscRStart + k] = kDiscLStart + mirror_disc_vertex(k);
    }
    return perm;
}

Camera look_at(const std::string& name, double px, double py, double pz, double tx, double ty,
               double tz, double f_norm, int res) {
    // OpenCV-style frame: x right, y down, z forward.
    double zx = tx - px, zy = ty - py, zz = tz - pz;
    const double zn = std::sqrt(zx * zx + zy * zy + zz * zz);
    zx /= zn;
    zy /= zn;
    zz /= zn;
    // x_cam = normalize(cross(z, up)) with world up (0,1,0)
    double xx = -zz, xy = 0.0, xz = zx;
    const double xn = std::sqrt(xx * xx + xy * xy + xz * xz);
    xx /= xn;
    xy /= xn;
    xz /= xn;
    // y_cam = cross(z, x)
    const double yx = zy * xz - zz * xy;
    const double yy = zz * xx - zx * xz;
    const double yz = zx * xy - zy * xx;

    Camera cam;
    cam.name = name;
    cam.rot = Tensor({3, 3}, {xx, xy, xz, yx, yy, yz, zx, zy, zz});
    Tensor t({3});
    t[0] = -(xx * px + xy * py + xz * pz);
    t[1] = -(yx * px + yy * py + yz * pz);
    t[2] = -(zx * px + zy * py + zz * pz);
    cam.trans = t;
    cam.fx = cam.fy = f_norm * res;
    cam.cx = cam.cy = 0.5 * (res - 1);
    return cam;
}

struct RigSpec {
    const char* name;
    double pos[3];
    double target[3];
    double f_norm;
    double rho_scale;
};

// Tracking set first (eyes then mouth), then the four less-oblique views.
constexpr RigSpec kRig[kNumCams] = {
    {"eyeL", {-50, 42, 85}, {-24, 26, 36}, 0.55, 0.55},
    {"eyeR", {50, 42, 85}, {24, 26, 36}, 0.55, 0.55},
    {"mouthL", {-42, -100, 105}, {-10, -42, 28}, 0.85, 0.50},
    {"mouthR", {42, -100, 105}, {10, -42, 28}, 0.85, 0.50},
    {"augUL", {-38, 38, 175}, {0, 12, 30}, 0.75, 1.10},
    {"augUR", {38, 38, 175}, {0, 12, 30}, 0.75, 1.10},
    {"augLL", {-38, -55, 175}, {0, -25, 30}, 0.75, 1.10},
    {"augLR", {38, -55, 175}, {0, -25, 30}, 0.75, 1.10},
};

Tensor solve_spd(const Tensor& a_in, const Tensor& b_in) {
    // Gaussian elimination with partial pivoting; a [n,n], b [n,m].
    Tensor a = a_in, b = b_in;
    const int n = a.dim(0), m = b.dim(1);
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::fabs(a.at2(r, col)) > std::fabs(a.at2(piv, col))) piv = r;
        if (std::fabs(a.at2(piv, col)) < 1e-12) throw HmcError("singular system");
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(a.at2(piv, c), a.at2(col, c));
            for (int c = 0; c < m; ++c) std::swap(b.at2(piv, c), b.at2(col, c));
        }
        const double d = a.at2(col, col);
        for (int r = col + 1; r < n; ++r) {
            const double f = a.at2(r, col) / d;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) a.at2(r, c) -= f * a.at2(col, c);
            for (int c = 0; c < m; ++c) b.at2(r, c) -= f * b.at2(col, c);
        }
    }
    Tensor x({n, m});
    for (int r = n - 1; r >= 0; --r) {
        for (int c = 0; c < m; ++c) {
            double acc = b.at2(r, c);
            for (int k = r + 1; k < n; ++k) acc -= a.at2(r, k) * x.at2(k, c);
            x.at2(r, c) = acc / a.at2(r, r);
        }
    }
    return x;
}

}  // namespace

const std::vector<std::string>& expression_vocabulary() {
    static const std::vector<std::string> vocab = {
        "neutral",        "jaw_open_max",  "jaw_open_half", "smile_max",   "smile_left",
        "smile_right",    "frown",         "brows_raised",  "brows_furrowed",
        "brow_left_raised", "eyes_closed", "wink_left",     "wink_right",  "pucker_max",
        "open_smile",
    };
    return vocab;
}

Tensor latent_for_tag(const std::string& tag) {
    Tensor s({kNumLatents});
    if (tag == "neutral") {
    } else if (tag == "jaw_open_max") {
        s[kJaw] = 1;
    } else if (tag == "jaw_open_half") {
        s[kJaw] = 0.5;
    } else if (tag == "smile_max") {
        s[kSmileL] = s[kSmileR] = 1;
    } else if (tag == "smile_left") {
        s[kSmileL] = 1;
    } else if (tag == "smile_right") {
        s[kSmileR] = 1;
    } else if (tag == "frown") {
        s[kSmileL] = s[kSmileR] = -0.8;
    } else if (tag == "brows_raised") {
        s[kBrowL] = s[kBrowR] = 1;
    } else if (tag == "brows_furrowed") {
        s[kBrowL] = s[kBrowR] = -0.8;
    } else if (tag == "brow_left_raised") {
        s[kBrowL] = 1;
    } else if (tag == "eyes_closed") {
        s[kEyeCloseL] = s[kEyeCloseR] = 1;
    } else if (tag == "wink_left") {
        s[kEyeCloseL] = 1;
    } else if (tag == "wink_right") {
        s[kEyeCloseR] = 1;
    } else if (tag == "pucker_max") {
        s[kPucker] = 1;
    } else if (tag == "open_smile") {
        s[kJaw] = 0.7;
        s[kSmileL] = s[kSmileR] = 0.8;
    } else {
        std::string msg = "unknown expression tag '" + tag + "'; vocabulary:";
        for (const auto& v : expression_vocabulary()) msg += " " + v;
        throw HmcError(msg);
    }
    return s;
}

World make_world(uint64_t seed, const WorldConfig& cfg) {
    World w;
    w.seed = seed;
    w.cfg = cfg;

    Rng rng(seed);
    Rng map_rng = rng.fork("worldmap");
    w.map = Tensor::randn({kCodeDim, kNumLatents}, map_rng, 0.5);

    // pinv = (A^T A)^{-1} A^T for the tall full-rank map
    Tensor ata({kNumLatents, kNumLatents});
    for (int i = 0; i < kNumLatents; ++i)
        for (int j = 0; j < kNumLatents; ++j) {
            double acc = 0;
            for (int r = 0; r < kCodeDim; ++r) acc += w.map.at2(r, i) * w.map.at2(r, j);
            ata.at2(i, j) = acc;
        }
    Tensor at({kNumLatents, kCodeDim});
    for (int i = 0; i < kNumLatents; ++i)
        for (int r = 0; r < kCodeDim; ++r) at.at2(i, r) = w.map.at2(r, i);
    w.map_pinv = solve_spd(ata, at);

    const int res = cfg.view_resolution;
    for (const auto& spec : kRig)
        w.cameras.push_back(look_at(spec.name, spec.pos[0], spec.pos[1], spec.pos[2],
                                    spec.target[0], spec.target[1], spec.target[2], spec.f_norm,
                                    res));

    const auto& lm = landmark_layout();
    w.landmarks = lm.indices;
    w.landmark_mirror = lm.mirror;
    w.mouth_probe = lm.mouth_probe;
    w.vertex_mirror = build_vertex_mirror();
    return w;
}

IdentityParams mean_identity() {
    IdentityParams id;
    id.identity_seed = -1;
    id.rest_mesh = Tensor({kNumVerts, 3});
    id.albedo = Tensor({kNumVerts, 3});
    id.blend_bases = Tensor({kNumLatents, kNumVerts, 3});
    id.feature_offsets = Tensor({kNumLandmarks, 3});
    id.splat_alpha = Tensor::ones({kNumVerts});

    // face grid
    for (int i = 0; i < kFaceVerts; ++i) {
        double x, y;
        grid_xy(i, x, y);
        id.rest_mesh.at2(i, 0) = x;
        id.rest_mesh.at2(i, 1) = y;
        id.rest_mesh.at2(i, 2) = dome_z(x, y);

        // base skin with gentle vertical shading and darker lips / brows
        double base = 0.62;
        double r = base, g = base * 0.86, b = base * 0.74;
        const double lipw = gauss2(x, y - kMouthY, 16.0, 9.0);
        r = r * (1 - lipw) + 0.55 * lipw;
        g = g * (1 - lipw) + 0.30 * lipw;
        b = b * (1 - lipw) + 0.28 * lipw;
        for (double sx : {-1.0, 1.0}) {
            const double broww = gauss2(x - sx * kEyeX, y - kBrowY, 13.0, 3.5);
            r = r * (1 - broww) + 0.25 * broww;
            g = g * (1 - broww) + 0.20 * broww;
            b = b * (1 - broww) + 0.18 * broww;
        }
        id.albedo.at2(i, 0) = r;
        id.albedo.at2(i, 1) = g;
        id.albedo.at2(i, 2) = b;

        // grid vertices in the eye sockets sit behind the discs and fade
        for (double sx : {-1.0, 1.0}) {
            const double d = std::sqrt((x - sx * kEyeX) * (x - sx * kEyeX) +
                                       (y - kEyeY) * (y - kEyeY));
            if (d < kDiscOuterR + 2.0) {
                id.rest_mesh.at2(i, 2) -= 5.0;
                id.splat_alpha[i] = 0.35;
            }
        }
    }

    // eye discs
    for (int side = 0; side < 2; ++side) {
        const double sx = side == 0 ? -1.0 : 1.0;
        const int base = side == 0 ? kDiscLStart : kDiscRStart;
        const double cx = sx * kEyeX, cy = kEyeY;
        const double cz = dome_z(cx, cy);
        for (int k = 0; k < kDiscVerts; ++k) {
            double dx, dy, bulge;
            disc_offsets(k, dx, dy, bulge);
            id.rest_mesh.at2(base + k, 0) = cx + dx;
            id.rest_mesh.at2(base + k, 1) = cy + dy;
            id.rest_mesh.at2(base + k, 2) = cz + bulge;
            double r, g, b, a;
            if (k == 0) {
                r = g = b = 0.05;
                a = 5.0;
            } else if (k <= 8) {
                r = 0.16;
                g = 0.22;
                b = 0.34;
                a = 4.0;
            } else {
                r = 0.93;
                g = 0.91;
                b = 0.88;
                a = 3.0;
            }
            id.albedo.at2(base + k, 0) = r;
            id.albedo.at2(base + k, 1) = g;
            id.albedo.at2(base + k, 2) = b;
            id.splat_alpha[base + k] = a;
        }
        Tensor center({3});
        center[0] = cx;
        center[1] = cy;
        center[2] = cz + kDiscBulge - kEyePivotDepth;
        if (side == 0)
            id.eye_center_l = center;
        else
            id.eye_center_r = center;
    }

    // blend bases on template coordinates; eye discs never deform
    for (int k = 0; k < kNumLatents; ++k)
        for (int i = 0; i < kFaceVerts; ++i) {
            double x, y;
            grid_xy(i, x, y);
            double d[3];
            basis_displacement(k, x, y, d);
            id.blend_bases.at3(k, i, 0) = d[0];
            id.blend_bases.at3(k, i, 1) = d[1];
            id.blend_bases.at3(k, i, 2) = d[2];
        }
    return id;
}

IdentityParams sample_identity(int64_t seed) {
    IdentityParams id = mean_identity();
    id.identity_seed = seed;
    Rng rng(fnv1a64(&seed, sizeof(seed), 0x9d4bull));

    Rng shape_rng = rng.fork("shape");
    const double sx = shape_rng.uniform(0.92, 1.08);
    const double sy = shape_rng.uniform(0.92, 1.08);
    const double sz = shape_rng.uniform(0.85, 1.15);
    BumpField field = sample_bump_field(shape_rng, 6, 1.6);

    for (int i = 0; i < kNumVerts; ++i) {
        const double x0 = id.rest_mesh.at2(i, 0), y0 = id.rest_mesh.at2(i, 1);
        double d[3];
        field.eval(x0, y0, d);
        id.rest_mesh.at2(i, 0) = sx * x0 + d[0];
        id.rest_mesh.at2(i, 1) = sy * y0 + d[1];
        id.rest_mesh.at2(i, 2) = sz * id.rest_mesh.at2(i, 2) + d[2];
    }
    auto scale_center = [&](Tensor& c) {
        double d[3];
        field.eval(c[0], c[1], d);
        c[0] = sx * c[0] + d[0];
        c[1] = sy * c[1] + d[1];
        c[2] = sz * c[2] + d[2];
    };
    scale_center(id.eye_center_l);
    scale_center(id.eye_center_r);

    // albedo variation: tone shift, low-frequency mottle, a few dark marks
    Rng alb_rng = rng.fork("albedo");
    const double tone = alb_rng.uniform(0.82, 1.12);
    BumpField mottle = sample_bump_field(alb_rng, 5, 0.05);
    struct Mark {
        double x, y, s, amp;
    };
    std::vector<Mark> marks;
    const int n_marks = 2 + static_cast<int>(alb_rng.uniform_int(3));
    for (int m = 0; m < n_marks; ++m)
        marks.push_back({alb_rng.uniform(-55.0, 55.0), alb_rng.uniform(-80.0, 70.0),
                         alb_rng.uniform(3.0, 7.0), alb_rng.uniform(0.12, 0.3)});
    Rng iris_rng = rng.fork("iris");
    const double iris_r = iris_rng.uniform(0.08, 0.35);
    const double iris_g = iris_rng.uniform(0.12, 0.35);
    const double iris_b = iris_rng.uniform(0.15, 0.5);

    for (int i = 0; i < kNumVerts; ++i) {
        const double x = id.rest_mesh.at2(i, 0), y = id.rest_mesh.at2(i, 1);
        if (i < kFaceVerts) {
            double d[3];
            mottle.eval(x, y, d);
            double dark = 0.0;
            for (const auto& m : marks) dark += m.amp * gauss2(x - m.x, y - m.y, m.s, m.s);
            for (int c = 0; c < 3; ++c) {
                double v = id.albedo.at2(i, c) * tone + d[c] - dark;
                id.albedo.at2(i, c) = std::min(1.0, std::max(0.0, v));
            }
        } else if ((i - kDiscLStart) % kDiscVerts >= 1 && (i - kDiscLStart) % kDiscVerts <= 8) {
            id.albedo.at2(i, 0) = iris_r;
            id.albedo.at2(i, 1) = iris_g;
            id.albedo.at2(i, 2) = iris_b;
        }
    }

    // per-basis amplitude character
    Rng amp_rng = rng.fork("basis");
    for (int k = 0; k < kNumLatents; ++k) {
        const double a = amp_rng.uniform(0.85, 1.2);
        for (int i = 0; i < kNumVerts; ++i)
            for (int c = 0; c < 3; ++c) id.blend_bases.at3(k, i, c) *= a;
    }

    // record the identity shift at each landmark
    const auto& lm = landmark_layout();
    IdentityParams base = mean_identity();
    for (int j = 0; j < kNumLandmarks; ++j) {
        const int v = lm.indices[j];
        for (int c = 0; c < 3; ++c)
            id.feature_offsets.at2(j, c) = id.rest_mesh.at2(v, c) - base.rest_mesh.at2(v, c);
    }
    return id;
}

IdentityParams mirror_identity(const IdentityParams& src) {
    IdentityParams out = src;
    const auto perm = build_vertex_mirror();
    static const int basis_swap[kNumLatents] = {kJaw,   kSmileR,    kSmileL,    kBrowR,
                                                kBrowL, kEyeCloseR, kEyeCloseL, kPucker};
    for (int i = 0; i < kNumVerts; ++i) {
        const int j = perm[i];
        for (int c = 0; c < 3; ++c) {
            const double v = src.rest_mesh.at2(j, c);
            out.rest_mesh.at2(i, c) = c == 0 ? -v : v;
            out.albedo.at2(i, c) = src.albedo.at2(j, c);
        }
        out.splat_alpha[i] = src.splat_alpha[j];
        for (int k = 0; k < kNumLatents; ++k)
            for (int c = 0; c < 3; ++c) {
                const double v = src.blend_bases.at3(basis_swap[k], j, c);
                out.blend_bases.at3(k, i, c) = c == 0 ? -v : v;
            }
    }
    out.eye_center_l = src.eye_center_r;
    out.eye_center_l[0] = -out.eye_center_l[0];
    out.eye_center_r = src.eye_center_l;
    out.eye_center_r[0] = -out.eye_center_r[0];

    const auto& lm = landmark_layout();
    for (int j = 0; j < kNumLandmarks; ++j) {
        const int mj = lm.mirror[j];
        out.feature_offsets.at2(j, 0) = -src.feature_offsets.at2(mj, 0);
        out.feature_offsets.at2(j, 1) = src.feature_offsets.at2(mj, 1);
        out.feature_offsets.at2(j, 2) = src.feature_offsets.at2(mj, 2);
    }
    return out;
}

Tensor mirror_latent(const Tensor& s) {
    static const int swap_idx[kNumLatents] = {kJaw,   kSmileR,    kSmileL,    kBrowR,
                                              kBrowL, kEyeCloseR, kEyeCloseL, kPucker};
    Tensor out({kNumLatents});
    for (int k = 0; k < kNumLatents; ++k) out[k] = s[swap_idx[k]];
    return out;
}

GazePair mirror_gaze(const GazePair& g) {
    GazePair out;
    out.left = g.right;
    out.right = g.left;
    out.left[0] = -out.left[0];
    out.right[0] = -out.right[0];
    return out;
}

Tensor expression_code(const World& w, const Tensor& s) {
    Tensor e({kCodeDim});
    for (int r = 0; r < kCodeDim; ++r) {
        double acc = 0;
        for (int k = 0; k < kNumLatents; ++k) acc += w.map.at2(r, k) * s[k];
        e[r] = acc;
    }
    return e;
}

Tensor inverse_expression_code(const World& w, const Tensor& e) {
    Tensor s({kNumLatents});
    for (int k = 0; k < kNumLatents; ++k) {
        double acc = 0;
        for (int r = 0; r < kCodeDim; ++r) acc += w.map_pinv.at2(k, r) * e[r];
        s[k] = acc;
    }
    return s;
}

namespace {

GazePair gaze_from_angles(double az, double alt, double verg) {
    auto dir = [](double a, double b) {
        Tensor g({3});
        g[0] = std::sin(a) * std::cos(b);
        g[1] = std::sin(b);
        g[2] = std::cos(a) * std::cos(b);
        const double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
        for (int i = 0; i < 3; ++i) g[i] /= n;
        return g;
    };
    GazePair g;
    g.left = dir(az + verg, alt);
    g.right = dir(az - verg, alt);
    return g;
}

}  // namespace

GazePair forward_gaze() { return gaze_from_angles(0, 0, 0); }

Tensor pack_gaze(const GazePair& g) {
    Tensor out({6});
    for (int i = 0; i < 3; ++i) {
        out[i] = g.left[i];
        out[3 + i] = g.right[i];
    }
    return out;
}

GazePair unpack_gaze(const Tensor& g6) {
    GazePair g;
    g.left = Tensor({3});
    g.right = Tensor({3});
    for (int i = 0; i < 3; ++i) {
        g.left[i] = g6[i];
        g.right[i] = g6[3 + i];
    }
    return g;
}

ExpressionSample sample_expression(const World& w, uint64_t seed,
                                   const std::optional<std::string>& tag) {
    ExpressionSample out;
    Rng rng(fnv1a64(&seed, sizeof(seed), w.seed ^ 0x5bd1e995ull));
    if (tag) {
        out.s = latent_for_tag(*tag);
        if (*tag == "eyes_closed") {
            out.gaze = forward_gaze();
        } else {
            const double az = rng.normal(0, 0.05), alt = rng.normal(0, 0.04);
            out.gaze = gaze_from_angles(az, alt, 0.0);
        }
    } else {
        out.s = Tensor({kNumLatents});
        for (int k = 0; k < kNumLatents; ++k)
            out.s[k] = std::min(1.0, std::max(-1.0, rng.normal(0.0, 0.45)));
        const double az = std::min(0.5, std::max(-0.5, rng.normal(0, 0.2)));
        const double alt = std::min(0.35, std::max(-0.35, rng.normal(0, 0.15)));
        out.gaze = gaze_from_angles(az, alt, rng.normal(0, 0.02));
    }
    out.e = expression_code(w, out.s);
    return out;
}

SessionState nominal_session() {
    SessionState s;
    s.session_seed = -1;
    for (int c = 0; c < kNumCams; ++c) {
        s.donning[c] = CameraDonning{};
        s.lighting[c] = CameraLighting{1.0, 1e9, 0.0};
    }
    return s;
}

SessionState sample_session(const World& w, uint64_t seed) {
    SessionState s;
    s.session_seed = static_cast<int64_t>(seed);
    Rng rng(fnv1a64(&seed, sizeof(seed), w.seed ^ 0x2545f491ull));
    const auto& cfg = w.cfg;
    const double res = cfg.view_resolution;
    for (int c = 0; c < kNumCams; ++c) {
        CameraDonning d;
        d.dx = rng.uniform(-cfg.don_trans, cfg.don_trans) * res;
        d.dy = rng.uniform(-cfg.don_trans, cfg.don_trans) * res;
        d.roll_deg = rng.uniform(-cfg.don_rot_deg, cfg.don_rot_deg);
        d.scale = rng.uniform(cfg.don_scale_min, cfg.don_scale_max);
        s.donning[c] = d;
        CameraLighting l;
        l.gain = rng.uniform(cfg.g0_min, cfg.g0_max);
        l.falloff_px = rng.uniform(cfg.rho_min, cfg.rho_max) * res * kRig[c].rho_scale;
        l.noise_sigma = cfg.noise_sigma;
        s.lighting[c] = l;
    }
    return s;
}

SessionState mirror_session(const SessionState& src) {
    SessionState out = src;
    static const int cam_swap[kNumCams] = {1, 0, 3, 2, 5, 4, 7, 6};
    for (int c = 0; c < kNumCams; ++c) {
        out.donning[c] = src.donning[cam_swap[c]];
        out.donning[c].dx = -out.donning[c].dx;
        out.donning[c].roll_deg = -out.donning[c].roll_deg;
        out.lighting[c] = src.lighting[cam_swap[c]];
    }
    return out;
}

Camera donned_camera(const Camera& cam, const CameraDonning& d) {
    Camera out = cam;
    out.fx *= d.scale;
    out.fy *= d.scale;
    out.cx += d.dx;
    out.cy += d.dy;
    const double a = d.roll_deg * kPi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    // in-plane roll about the optical axis, applied in camera space
    Tensor rz({3, 3}, {ca, -sa, 0, sa, ca, 0, 0, 0, 1});
    Tensor r({3, 3});
    Tensor t({3});
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double acc = 0;
            for (int k = 0; k < 3; ++k) acc += rz.at2(i, k) * cam.rot.at2(k, j);
            r.at2(i, j) = acc;
        }
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += rz.at2(i, k) * cam.trans[k];
        t[i] = acc;
    }
    out.rot = r;
    out.trans = t;
    return out;
}

namespace {

// Landmark pixel coordinates of the given vertices through one camera.
// Shared by frame rendering and the rig template so the two match bitwise.
void project_keypoints(const World& w, const Tensor& verts, const Camera& cam, Tensor& out,
                       int cam_index) {
    ad::Var pts = decoder::to_camera_space(ad::constant(verts), cam);
    const Tensor& pc = pts->value;
    for (int j = 0; j < kNumLandmarks; ++j) {
        const int vi = w.landmarks[j];
        const double z = pc.at2(vi, 2);
        out.at3(cam_index, j, 0) = cam.fx * pc.at2(vi, 0) / z + cam.cx;
        out.at3(cam_index, j, 1) = cam.fy * pc.at2(vi, 1) / z + cam.cy;
    }
}

}  // namespace

Tensor template_keypoints(const World& w) {
    const IdentityParams id = mean_identity();
    const SessionState nominal = nominal_session();
    Tensor out({kNumCams, kNumLandmarks, 2});
    for (int c = 0; c < kNumCams; ++c) {
        Camera cam = donned_camera(w.cameras[c], nominal.donning[c]);
        project_keypoints(w, id.rest_mesh, cam, out, c);
    }
    return out;
}

HmcFrame render_hmc_frame(const World& w, const IdentityParams& id, const Tensor& e,
                          const GazePair& g, const SessionState& session, bool labeled) {
    HmcFrame frame;
    frame.identity_seed = id.identity_seed;
    frame.session_seed = session.session_seed;
    const int res = w.cfg.view_resolution;

    Tensor g6 = pack_gaze(g);
    auto [verts, tex] = decoder::decode_tensors(w, id, e, g6);
    ad::Var verts_v = ad::constant(verts);

    // luminance for the monochrome HMC sensors
    Tensor lum({kNumVerts, 1});
    for (int i = 0; i < kNumVerts; ++i)
        lum.at2(i, 0) =
            0.299 * tex.at2(i, 0) + 0.587 * tex.at2(i, 1) + 0.114 * tex.at2(i, 2);
    ad::Var lum_v = ad::constant(lum);
    auto alpha = std::make_shared<const Tensor>(id.splat_alpha);

    frame.views = Tensor({kNumCams, res, res});
    frame.keypoints = Tensor({kNumCams, kNumLandmarks, 2});

    // per-frame noise stream, deterministic in all arguments
    uint64_t nh = w.seed;
    nh = fnv1a64(&session.session_seed, sizeof(session.session_seed), nh);
    uint64_t ed = e.digest(), gd = g6.digest();
    nh = fnv1a64(&ed, sizeof(ed), nh);
    nh = fnv1a64(&gd, sizeof(gd), nh);
    nh = fnv1a64(&id.identity_seed, sizeof(id.identity_seed), nh);
    Rng noise_rng(nh);

    const double radius = decoder::effective_radius(w.cfg.splat_radius, res);
    for (int c = 0; c < kNumCams; ++c) {
        Camera cam = donned_camera(w.cameras[c], session.donning[c]);
        ad::Var img = decoder::render_camera(verts_v, lum_v, cam, res, radius, 1e-4, alpha);
        const CameraLighting& light = session.lighting[c];
        const double inv_rho2 = 1.0 / (light.falloff_px * light.falloff_px);
        for (int py = 0; py < res; ++py)
            for (int px = 0; px < res; ++px) {
                const double r2 = (px - cam.cx) * (px - cam.cx) + (py - cam.cy) * (py - cam.cy);
                double v = light.gain * std::exp(-r2 * inv_rho2) * img->value.at2(py, px);
                if (light.noise_sigma > 0) v += light.noise_sigma * noise_rng.normal();
                frame.views.at3(c, py, px) = std::min(1.0, std::max(0.0, v));
            }

        project_keypoints(w, verts, cam, frame.keypoints, c);
    }

    if (labeled) {
        frame.e_true = e;
        frame.g_true = g6;
    }
    return frame;
}

}  // namespace hmc::world
