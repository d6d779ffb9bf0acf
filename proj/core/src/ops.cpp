#include "pseg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace pseg::ops {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<MatCM<T>>;

constexpr int64_t kConvTile = 16384;

void expect(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

struct ConvDims {
    int64_t B, Ci, D, H, W;
    int64_t Co, kd, kh, kw;
    int sd, sh, sw;
    int pd, ph, pw;
    int64_t z_off = 0;  // central-slice offset when depth-collapsed
    int64_t Do, Ho, Wo;
    bool collapsed = false;

    int64_t kvol() const { return kd * kh * kw; }
    int64_t in_vol() const { return D * H * W; }
    int64_t out_vol() const { return Do * Ho * Wo; }
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, const ConvGeom& geom) {
    ConvDims c{};
    c.B = xs[0];
    c.Ci = xs[1];
    c.D = xs[2];
    c.H = xs[3];
    c.W = xs[4];
    c.Co = ws[0];
    c.kd = ws[2];
    c.kh = ws[3];
    c.kw = ws[4];
    c.sd = geom.stride[0];
    c.sh = geom.stride[1];
    c.sw = geom.stride[2];
    c.pd = geom.pad[0];
    c.ph = geom.pad[1];
    c.pw = geom.pad[2];
    if (ws[1] != c.Ci) throw ShapeError("conv3d: weight channel mismatch");
    if (c.D == 1 && c.kd > 1) {
        c.collapsed = true;
        c.z_off = c.kd / 2;
        c.kd = 1;
        c.pd = 0;
    }
    auto osz = [](int64_t n, int64_t k, int p, int s) {
        const int64_t span = n + 2 * p - k;
        if (span < 0) throw ShapeError("conv3d: kernel larger than padded input");
        return span / s + 1;
    };
    c.Do = osz(c.D, c.kd, c.pd, c.sd);
    c.Ho = osz(c.H, c.kh, c.ph, c.sh);
    c.Wo = osz(c.W, c.kw, c.pw, c.sw);
    return c;
}

// Packs the receptive fields of out voxels [v0, v0+len) into col (K x len,
// column-major). K ordering is (ci, kz, ky, kx), matching the weight layout.
template <typename T>
void im2col(const T* xb, const ConvDims& c, int64_t v0, int64_t len, T* col) {
    const int64_t K = c.Ci * c.kvol();
    for (int64_t v = 0; v < len; ++v) {
        const int64_t ov = v0 + v;
        const int64_t od = ov / (c.Ho * c.Wo);
        const int64_t rem = ov % (c.Ho * c.Wo);
        const int64_t oh = rem / c.Wo;
        const int64_t ow = rem % c.Wo;
        const int64_t id0 = od * c.sd - c.pd;
        const int64_t ih0 = oh * c.sh - c.ph;
        const int64_t iw0 = ow * c.sw - c.pw;
        T* out = col + v * K;
        for (int64_t ci = 0; ci < c.Ci; ++ci) {
            const T* xc = xb + ci * c.in_vol();
            for (int64_t kz = 0; kz < c.kd; ++kz) {
                const int64_t id = id0 + kz;
                const bool dok = id >= 0 && id < c.D;
                for (int64_t ky = 0; ky < c.kh; ++ky) {
                    const int64_t ih = ih0 + ky;
                    const bool hok = dok && ih >= 0 && ih < c.H;
                    const T* row = xc + (id * c.H + ih) * c.W;
                    for (int64_t kx = 0; kx < c.kw; ++kx) {
                        const int64_t iw = iw0 + kx;
                        *out++ = (hok && iw >= 0 && iw < c.W) ? row[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(T* gxb, const ConvDims& c, int64_t v0, int64_t len, const T* col) {
    const int64_t K = c.Ci * c.kvol();
    for (int64_t v = 0; v < len; ++v) {
        const int64_t ov = v0 + v;
        const int64_t od = ov / (c.Ho * c.Wo);
        const int64_t rem = ov % (c.Ho * c.Wo);
        const int64_t oh = rem / c.Wo;
        const int64_t ow = rem % c.Wo;
        const int64_t id0 = od * c.sd - c.pd;
        const int64_t ih0 = oh * c.sh - c.ph;
        const int64_t iw0 = ow * c.sw - c.pw;
        const T* in = col + v * K;
        for (int64_t ci = 0; ci < c.Ci; ++ci) {
            T* gxc = gxb + ci * c.in_vol();
            for (int64_t kz = 0; kz < c.kd; ++kz) {
                const int64_t id = id0 + kz;
                const bool dok = id >= 0 && id < c.D;
                for (int64_t ky = 0; ky < c.kh; ++ky) {
                    const int64_t ih = ih0 + ky;
                    const bool hok = dok && ih >= 0 && ih < c.H;
                    T* row = gxc + (id * c.H + ih) * c.W;
                    for (int64_t kx = 0; kx < c.kw; ++kx) {
                        const int64_t iw = iw0 + kx;
                        const T val = *in++;
                        if (hok && iw >= 0 && iw < c.W) row[iw] += val;
                    }
                }
            }
        }
    }
}

// Compact [Co,Ci,1,kh,kw] copy of the central depth slice.
template <typename T>
Tensor<T> central_slice(const Tensor<T>& w, int64_t z_off) {
    const Shape& s = w.shape();
    Tensor<T> out(Shape{s[0], s[1], 1, s[3], s[4]});
    const int64_t plane = s[3] * s[4];
    const int64_t kvol = s[2] * plane;
    for (int64_t oc = 0; oc < s[0] * s[1]; ++oc) {
        const T* src = w.data() + oc * kvol + z_off * plane;
        std::copy(src, src + plane, out.data() + oc * plane);
    }
    return out;
}

}  // namespace

template <typename T>
Var<T> conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvGeom geom) {
    expect(x->value.rank() == 5, "conv3d: input must be [B,C,D,H,W]");
    expect(w->value.rank() == 5, "conv3d: weight must be [Co,Ci,kd,kh,kw]");
    const ConvDims c = conv_dims(x->value.shape(), w->value.shape(), geom);
    if (b) expect(b->value.size() == c.Co, "conv3d: bias size mismatch");

    Tensor<T> w_eff_store;
    const Tensor<T>* w_eff = &w->value;
    if (c.collapsed) {
        w_eff_store = central_slice(w->value, c.z_off);
        w_eff = &w_eff_store;
    }
    const int64_t K = c.Ci * c.kvol();
    const int64_t Vo = c.out_vol();

    Tensor<T> y(Shape{c.B, c.Co, c.Do, c.Ho, c.Wo});
    {
        CMapRM<T> W(w_eff->data(), c.Co, K);
        std::vector<T> colbuf(static_cast<size_t>(K * std::min<int64_t>(kConvTile, Vo)));
        for (int64_t bb = 0; bb < c.B; ++bb) {
            const T* xb = x->value.data() + bb * c.Ci * c.in_vol();
            MapRM<T> Y(y.data() + bb * c.Co * Vo, c.Co, Vo);
            for (int64_t v0 = 0; v0 < Vo; v0 += kConvTile) {
                const int64_t len = std::min<int64_t>(kConvTile, Vo - v0);
                im2col(xb, c, v0, len, colbuf.data());
                MapCM<T> col(colbuf.data(), K, len);
                Y.middleCols(v0, len).noalias() = W * col;
            }
            if (b) {
                for (int64_t co = 0; co < c.Co; ++co) Y.row(co).array() += b->value[co];
            }
        }
    }

    const bool need = tape.recording() && (x->requires_grad || w->requires_grad || (b && b->requires_grad));
    auto out = make_var(std::move(y), need);
    if (need) {
        Tensor<T> w_snapshot = *w_eff;  // values as of forward time
        tape.push([x, w, b, out, c, K, Vo, w_snapshot]() {
            if (!out->has_grad()) return;
            const int64_t kvol = c.kvol();
            Tensor<T> gw_eff(Shape{c.Co, K});
            std::vector<T> colbuf(static_cast<size_t>(K * std::min<int64_t>(kConvTile, Vo)));
            std::vector<T> gcolbuf = colbuf;
            CMapRM<T> W(w_snapshot.data(), c.Co, K);
            MapRM<T> GW(gw_eff.data(), c.Co, K);
            if (x->requires_grad) x->ensure_grad();
            for (int64_t bb = 0; bb < c.B; ++bb) {
                const T* xb = x->value.data() + bb * c.Ci * c.in_vol();
                CMapRM<T> GY(out->grad.data() + bb * c.Co * Vo, c.Co, Vo);
                for (int64_t v0 = 0; v0 < Vo; v0 += kConvTile) {
                    const int64_t len = std::min<int64_t>(kConvTile, Vo - v0);
                    if (w->requires_grad || x->requires_grad) im2col(xb, c, v0, len, colbuf.data());
                    MapCM<T> col(colbuf.data(), K, len);
                    if (w->requires_grad) GW.noalias() += GY.middleCols(v0, len) * col.transpose();
                    if (x->requires_grad) {
                        MapCM<T> gcol(gcolbuf.data(), K, len);
                        gcol.noalias() = W.transpose() * GY.middleCols(v0, len);
                        col2im_add(x->grad.data() + bb * c.Ci * c.in_vol(), c, v0, len, gcolbuf.data());
                    }
                }
                if (b && b->requires_grad) {
                    b->ensure_grad();
                    for (int64_t co = 0; co < c.Co; ++co) b->grad[co] += GY.row(co).sum();
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                if (!c.collapsed) {
                    for (int64_t i = 0; i < gw_eff.size(); ++i) w->grad[i] += gw_eff[i];
                } else {
                    const Shape& ws = w->value.shape();
                    const int64_t plane = ws[3] * ws[4];
                    const int64_t full_kvol = ws[2] * plane;
                    for (int64_t oc = 0; oc < ws[0] * ws[1]; ++oc) {
                        T* dst = w->grad.data() + oc * full_kvol + c.z_off * plane;
                        const T* src = gw_eff.data() + oc * kvol;
                        for (int64_t p = 0; p < plane; ++p) dst[p] += src[p];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> conv_transpose3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        Stride3 stride, bool collapse_depth) {
    expect(x->value.rank() == 5, "conv_transpose3d: input must be [B,C,d,h,w]");
    expect(w->value.rank() == 5, "conv_transpose3d: weight must be [Ci,Co,kd,kh,kw]");
    const Shape& xs = x->value.shape();
    const Shape& ws = w->value.shape();
    const int64_t B = xs[0], Ci = xs[1], d = xs[2], h = xs[3], wd = xs[4];
    const int64_t Co = ws[1];
    expect(ws[0] == Ci, "conv_transpose3d: weight channel mismatch");
    expect(ws[2] == stride[0] && ws[3] == stride[1] && ws[4] == stride[2],
           "conv_transpose3d: kernel must equal stride");
    if (b) expect(b->value.size() == Co, "conv_transpose3d: bias size mismatch");

    int64_t kd = ws[2], kh = ws[3], kw = ws[4];
    int64_t z_off = 0;
    if (collapse_depth && kd > 1) {
        z_off = kd / 2;
        kd = 1;
    }
    expect(!(collapse_depth && d != 1), "conv_transpose3d: collapse_depth requires depth-1 input");
    const int64_t Do = d * kd, Ho = h * kh, Wo = wd * kw;
    const int64_t Vin = d * h * wd;
    const int64_t Ko = Co * kd * kh * kw;

    // Compact weight [Ci, Ko] for the (possibly depth-collapsed) kernel.
    Tensor<T> w_eff(Shape{Ci, Ko});
    {
        const int64_t plane = ws[3] * ws[4];
        const int64_t full_k = ws[2] * plane;
        for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t co = 0; co < Co; ++co) {
                const T* src = w->value.data() + (ci * Co + co) * full_k + z_off * plane;
                T* dst = w_eff.data() + ci * Ko + co * (kd * kh * kw);
                std::copy(src, src + kd * plane, dst);
            }
    }

    Tensor<T> y(Shape{B, Co, Do, Ho, Wo});
    Tensor<T> outcols(Shape{Ko, Vin});
    auto scatter = [&](int64_t bb) {
        T* yb = y.data() + bb * Co * Do * Ho * Wo;
        for (int64_t v = 0; v < Vin; ++v) {
            const int64_t vd = v / (h * wd);
            const int64_t rem = v % (h * wd);
            const int64_t vh = rem / wd;
            const int64_t vw = rem % wd;
            const T* src = outcols.data() + v;  // column v, stride Vin between rows
            for (int64_t co = 0; co < Co; ++co) {
                const T bias = b ? b->value[co] : T(0);
                for (int64_t kz = 0; kz < kd; ++kz)
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t idx = ((co * kd + kz) * kh + ky) * kw + kx;
                            yb[((co * Do + vd * kd + kz) * Ho + vh * kh + ky) * Wo + vw * kw + kx] =
                                src[idx * Vin] + bias;
                        }
            }
        }
    };
    {
        CMapRM<T> W(w_eff.data(), Ci, Ko);
        MapCM<T> OC(outcols.data(), Ko, Vin);
        for (int64_t bb = 0; bb < B; ++bb) {
            CMapRM<T> X(x->value.data() + bb * Ci * Vin, Ci, Vin);
            OC.noalias() = W.transpose() * X;
            scatter(bb);
        }
    }

    const bool need = tape.recording() && (x->requires_grad || w->requires_grad || (b && b->requires_grad));
    auto out = make_var(std::move(y), need);
    if (need) {
        const Shape ws_full = ws;
        tape.push([x, w, b, out, w_eff, B, Ci, Co, d, h, wd, kd, kh, kw, z_off, Do, Ho, Wo, Vin, Ko,
                   ws_full]() {
            if (!out->has_grad()) return;
            Tensor<T> goutcols(Shape{Ko, Vin});
            Tensor<T> gw_eff(Shape{Ci, Ko});
            CMapRM<T> W(w_eff.data(), Ci, Ko);
            MapCM<T> GOC(goutcols.data(), Ko, Vin);
            MapRM<T> GW(gw_eff.data(), Ci, Ko);
            if (x->requires_grad) x->ensure_grad();
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* gyb = out->grad.data() + bb * Co * Do * Ho * Wo;
                // gather grads of the scattered positions back into columns
                for (int64_t v = 0; v < Vin; ++v) {
                    const int64_t vd = v / (h * wd);
                    const int64_t rem = v % (h * wd);
                    const int64_t vh = rem / wd;
                    const int64_t vw = rem % wd;
                    T* dst = goutcols.data() + v;
                    for (int64_t co = 0; co < Co; ++co)
                        for (int64_t kz = 0; kz < kd; ++kz)
                            for (int64_t ky = 0; ky < kh; ++ky)
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t idx = ((co * kd + kz) * kh + ky) * kw + kx;
                                    dst[idx * Vin] =
                                        gyb[((co * Do + vd * kd + kz) * Ho + vh * kh + ky) * Wo +
                                            vw * kw + kx];
                                }
                }
                CMapRM<T> X(x->value.data() + bb * Ci * Vin, Ci, Vin);
                if (x->requires_grad) {
                    MapRM<T> GX(x->grad.data() + bb * Ci * Vin, Ci, Vin);
                    GX.noalias() += W * GOC;
                }
                if (w->requires_grad) GW.noalias() += X * GOC.transpose();
                if (b && b->requires_grad) {
                    b->ensure_grad();
                    const int64_t vol = Do * Ho * Wo;
                    for (int64_t co = 0; co < Co; ++co) {
                        T s = 0;
                        const T* p = gyb + co * vol;
                        for (int64_t i = 0; i < vol; ++i) s += p[i];
                        b->grad[co] += s;
                    }
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                const int64_t plane = ws_full[3] * ws_full[4];
                const int64_t full_k = ws_full[2] * plane;
                for (int64_t ci = 0; ci < Ci; ++ci)
                    for (int64_t co = 0; co < Co; ++co) {
                        T* dst = w->grad.data() + (ci * Co + co) * full_k + z_off * plane;
                        const T* src = gw_eff.data() + ci * Ko + co * (kd * kh * kw);
                        for (int64_t p = 0; p < kd * plane; ++p) dst[p] += src[p];
                    }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> instance_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     double eps) {
    expect(x->value.rank() == 5, "instance_norm: input must be [B,C,D,H,W]");
    const Shape& s = x->value.shape();
    const int64_t B = s[0], C = s[1], V = s[2] * s[3] * s[4];
    expect(gamma->value.size() == C && beta->value.size() == C, "instance_norm: affine size mismatch");

    Tensor<T> y(s);
    auto xhat = std::make_shared<Tensor<T>>(s);
    auto inv_std = std::make_shared<Tensor<T>>(Shape{B, C});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = x->value.data() + bc * V;
        T* hp = xhat->data() + bc * V;
        T* yp = y.data() + bc * V;
        double mean = 0;
        for (int64_t i = 0; i < V; ++i) mean += xp[i];
        mean /= static_cast<double>(V);
        double var = 0;
        for (int64_t i = 0; i < V; ++i) {
            const double dxi = xp[i] - mean;
            var += dxi * dxi;
        }
        var /= static_cast<double>(V);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[bc] = static_cast<T>(inv);
        const T g = gamma->value[bc % C];
        const T bt = beta->value[bc % C];
        for (int64_t i = 0; i < V; ++i) {
            const T h = static_cast<T>((xp[i] - mean) * inv);
            hp[i] = h;
            yp[i] = g * h + bt;
        }
    }

    const bool need = tape.recording() &&
                      (x->requires_grad || gamma->requires_grad || beta->requires_grad);
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, gamma, beta, out, xhat, inv_std, B, C, V]() {
            if (!out->has_grad()) return;
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const T* gp = out->grad.data() + bc * V;
                const T* hp = xhat->data() + bc * V;
                const int64_t c = bc % C;
                if (gamma->requires_grad) {
                    gamma->ensure_grad();
                    double s = 0;
                    for (int64_t i = 0; i < V; ++i) s += static_cast<double>(gp[i]) * hp[i];
                    gamma->grad[c] += static_cast<T>(s);
                }
                if (beta->requires_grad) {
                    beta->ensure_grad();
                    double s = 0;
                    for (int64_t i = 0; i < V; ++i) s += gp[i];
                    beta->grad[c] += static_cast<T>(s);
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    T* gx = x->grad.data() + bc * V;
                    const double g = gamma->value[c];
                    const double inv = (*inv_std)[bc];
                    double mg = 0, mgh = 0;
                    for (int64_t i = 0; i < V; ++i) {
                        const double dg = static_cast<double>(gp[i]) * g;
                        mg += dg;
                        mgh += dg * hp[i];
                    }
                    mg /= static_cast<double>(V);
                    mgh /= static_cast<double>(V);
                    for (int64_t i = 0; i < V; ++i) {
                        const double dg = static_cast<double>(gp[i]) * g;
                        gx[i] += static_cast<T>(inv * (dg - mg - hp[i] * mgh));
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& x, double negative_slope) {
    Tensor<T> y(x->value.shape());
    const T a = static_cast<T>(negative_slope);
    for (int64_t i = 0; i < y.size(); ++i) {
        const T v = x->value[i];
        y[i] = v > T(0) ? v : a * v;
    }
    const bool need = tape.recording() && x->requires_grad;
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, out, a]() {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (int64_t i = 0; i < x->grad.size(); ++i)
                x->grad[i] += out->grad[i] * (x->value[i] > T(0) ? T(1) : a);
        });
    }
    return out;
}

namespace {

struct AxisTable {
    std::vector<int64_t> i0, i1;
    std::vector<double> t;
};

AxisTable interp_axis(int64_t in, int64_t out) {
    AxisTable tab;
    tab.i0.resize(static_cast<size_t>(out));
    tab.i1.resize(static_cast<size_t>(out));
    tab.t.resize(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        double f = std::floor(src);
        double t = src - f;
        int64_t a = static_cast<int64_t>(f);
        int64_t bidx = a + 1;
        if (a < 0) a = 0;
        if (a > in - 1) a = in - 1;
        if (bidx < 0) bidx = 0;
        if (bidx > in - 1) bidx = in - 1;
        tab.i0[static_cast<size_t>(o)] = a;
        tab.i1[static_cast<size_t>(o)] = bidx;
        tab.t[static_cast<size_t>(o)] = t;
    }
    return tab;
}

}  // namespace

template <typename T>
Var<T> interp_linear(Tape<T>& tape, const Var<T>& x, Dims3 out_dhw) {
    expect(x->value.rank() == 5, "interp_linear: input must be [B,C,D,H,W]");
    const Shape& s = x->value.shape();
    const int64_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    const int64_t Do = out_dhw[0], Ho = out_dhw[1], Wo = out_dhw[2];
    if (Do < 1 || Ho < 1 || Wo < 1) throw ShapeError("interp_linear: output dims must be positive");

    const AxisTable td = interp_axis(D, Do), th = interp_axis(H, Ho), tw = interp_axis(W, Wo);
    Tensor<T> y(Shape{B, C, Do, Ho, Wo});
    auto lerp = [](double v0, double v1, double t) { return v0 + t * (v1 - v0); };
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = x->value.data() + bc * D * H * W;
        T* yp = y.data() + bc * Do * Ho * Wo;
        for (int64_t od = 0; od < Do; ++od) {
            const int64_t d0 = td.i0[od], d1 = td.i1[od];
            const double tdv = td.t[od];
            for (int64_t oh = 0; oh < Ho; ++oh) {
                const int64_t h0 = th.i0[oh], h1 = th.i1[oh];
                const double thv = th.t[oh];
                for (int64_t ow = 0; ow < Wo; ++ow) {
                    const int64_t w0 = tw.i0[ow], w1 = tw.i1[ow];
                    const double twv = tw.t[ow];
                    const double c00 = lerp(xp[(d0 * H + h0) * W + w0], xp[(d0 * H + h0) * W + w1], twv);
                    const double c01 = lerp(xp[(d0 * H + h1) * W + w0], xp[(d0 * H + h1) * W + w1], twv);
                    const double c10 = lerp(xp[(d1 * H + h0) * W + w0], xp[(d1 * H + h0) * W + w1], twv);
                    const double c11 = lerp(xp[(d1 * H + h1) * W + w0], xp[(d1 * H + h1) * W + w1], twv);
                    const double c0 = lerp(c00, c01, thv);
                    const double c1 = lerp(c10, c11, thv);
                    yp[(od * Ho + oh) * Wo + ow] = static_cast<T>(lerp(c0, c1, tdv));
                }
            }
        }
    }

    const bool need = tape.recording() && x->requires_grad;
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, out, td, th, tw, B, C, D, H, W, Do, Ho, Wo]() {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                T* gx = x->grad.data() + bc * D * H * W;
                const T* gy = out->grad.data() + bc * Do * Ho * Wo;
                for (int64_t od = 0; od < Do; ++od) {
                    const int64_t d0 = td.i0[od], d1 = td.i1[od];
                    const double wd1 = td.t[od], wd0 = 1.0 - wd1;
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        const int64_t h0 = th.i0[oh], h1 = th.i1[oh];
                        const double wh1 = th.t[oh], wh0 = 1.0 - wh1;
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            const int64_t w0 = tw.i0[ow], w1 = tw.i1[ow];
                            const double ww1 = tw.t[ow], ww0 = 1.0 - ww1;
                            const double g = gy[(od * Ho + oh) * Wo + ow];
                            gx[(d0 * H + h0) * W + w0] += static_cast<T>(g * wd0 * wh0 * ww0);
                            gx[(d0 * H + h0) * W + w1] += static_cast<T>(g * wd0 * wh0 * ww1);
                            gx[(d0 * H + h1) * W + w0] += static_cast<T>(g * wd0 * wh1 * ww0);
                            gx[(d0 * H + h1) * W + w1] += static_cast<T>(g * wd0 * wh1 * ww1);
                            gx[(d1 * H + h0) * W + w0] += static_cast<T>(g * wd1 * wh0 * ww0);
                            gx[(d1 * H + h0) * W + w1] += static_cast<T>(g * wd1 * wh0 * ww1);
                            gx[(d1 * H + h1) * W + w0] += static_cast<T>(g * wd1 * wh1 * ww0);
                            gx[(d1 * H + h1) * W + w1] += static_cast<T>(g * wd1 * wh1 * ww1);
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    expect(a->value.rank() == 5 && b->value.rank() == 5, "concat_channels: inputs must be 5-d");
    const Shape& sa = a->value.shape();
    const Shape& sb = b->value.shape();
    expect(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3] && sa[4] == sb[4],
           "concat_channels: batch/spatial dims differ");
    const int64_t B = sa[0], Ca = sa[1], Cb = sb[1], V = sa[2] * sa[3] * sa[4];
    Tensor<T> y(Shape{B, Ca + Cb, sa[2], sa[3], sa[4]});
    for (int64_t bb = 0; bb < B; ++bb) {
        std::copy(a->value.data() + bb * Ca * V, a->value.data() + (bb + 1) * Ca * V,
                  y.data() + bb * (Ca + Cb) * V);
        std::copy(b->value.data() + bb * Cb * V, b->value.data() + (bb + 1) * Cb * V,
                  y.data() + bb * (Ca + Cb) * V + Ca * V);
    }
    const bool need = tape.recording() && (a->requires_grad || b->requires_grad);
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([a, b, out, B, Ca, Cb, V]() {
            if (!out->has_grad()) return;
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* g = out->grad.data() + bb * (Ca + Cb) * V;
                if (a->requires_grad) {
                    a->ensure_grad();
                    T* ga = a->grad.data() + bb * Ca * V;
                    for (int64_t i = 0; i < Ca * V; ++i) ga[i] += g[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    T* gb = b->grad.data() + bb * Cb * V;
                    for (int64_t i = 0; i < Cb * V; ++i) gb[i] += g[Ca * V + i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> concat_prompt(Tape<T>& tape, const Var<T>& prompt, const Var<T>& x) {
    expect(prompt->value.rank() == 4, "concat_prompt: prompt must be [K,D,H,W]");
    expect(x->value.rank() == 5, "concat_prompt: features must be [B,C,D,H,W]");
    const Shape& sp = prompt->value.shape();
    const Shape& sx = x->value.shape();
    expect(sp[1] == sx[2] && sp[2] == sx[3] && sp[3] == sx[4],
           "concat_prompt: spatial dims differ");
    const int64_t B = sx[0], K = sp[0], C = sx[1], V = sx[2] * sx[3] * sx[4];
    Tensor<T> y(Shape{B, K + C, sx[2], sx[3], sx[4]});
    for (int64_t bb = 0; bb < B; ++bb) {
        std::copy(prompt->value.data(), prompt->value.data() + K * V, y.data() + bb * (K + C) * V);
        std::copy(x->value.data() + bb * C * V, x->value.data() + (bb + 1) * C * V,
                  y.data() + bb * (K + C) * V + K * V);
    }
    const bool need = tape.recording() && (prompt->requires_grad || x->requires_grad);
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([prompt, x, out, B, K, C, V]() {
            if (!out->has_grad()) return;
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* g = out->grad.data() + bb * (K + C) * V;
                if (prompt->requires_grad) {
                    prompt->ensure_grad();
                    for (int64_t i = 0; i < K * V; ++i) prompt->grad[i] += g[i];
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    T* gx = x->grad.data() + bb * C * V;
                    for (int64_t i = 0; i < C * V; ++i) gx[i] += g[K * V + i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> select_channel(Tape<T>& tape, const Var<T>& x, int64_t channel) {
    expect(x->value.rank() == 5, "select_channel: input must be [B,C,D,H,W]");
    const Shape& s = x->value.shape();
    if (channel < 0 || channel >= s[1])
        throw LookupError("select_channel: channel " + std::to_string(channel) + " out of range [0," +
                          std::to_string(s[1]) + ")");
    const int64_t B = s[0], C = s[1], V = s[2] * s[3] * s[4];
    Tensor<T> y(Shape{B, 1, s[2], s[3], s[4]});
    for (int64_t bb = 0; bb < B; ++bb)
        std::copy(x->value.data() + (bb * C + channel) * V, x->value.data() + (bb * C + channel + 1) * V,
                  y.data() + bb * V);
    const bool need = tape.recording() && x->requires_grad;
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, out, channel, B, C, V]() {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (int64_t bb = 0; bb < B; ++bb) {
                T* gx = x->grad.data() + (bb * C + channel) * V;
                const T* g = out->grad.data() + bb * V;
                for (int64_t i = 0; i < V; ++i) gx[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Var<T> add_broadcast_prior(Tape<T>& tape, const Var<T>& x, const Var<T>& prior) {
    expect(x->value.rank() == 5, "add_broadcast_prior: input must be [B,C,D,H,W]");
    expect(prior->value.rank() == 4 && prior->value.dim(0) == 1,
           "add_broadcast_prior: prior must be [1,D,H,W]");
    const Shape& s = x->value.shape();
    expect(prior->value.dim(1) == s[2] && prior->value.dim(2) == s[3] && prior->value.dim(3) == s[4],
           "add_broadcast_prior: spatial dims differ");
    const int64_t BC = s[0] * s[1], V = s[2] * s[3] * s[4];
    Tensor<T> y(s);
    for (int64_t bc = 0; bc < BC; ++bc) {
        const T* xp = x->value.data() + bc * V;
        T* yp = y.data() + bc * V;
        for (int64_t i = 0; i < V; ++i) yp[i] = xp[i] + prior->value[i];
    }
    const bool need = tape.recording() && (x->requires_grad || prior->requires_grad);
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, prior, out, BC, V]() {
            if (!out->has_grad()) return;
            if (x->requires_grad) {
                x->ensure_grad();
                for (int64_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
            }
            if (prior->requires_grad) {
                prior->ensure_grad();
                for (int64_t bc = 0; bc < BC; ++bc) {
                    const T* g = out->grad.data() + bc * V;
                    for (int64_t i = 0; i < V; ++i) prior->grad[i] += g[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> affine_map(Tape<T>& tape, const Var<T>& w, const Var<T>& x, const Var<T>& b) {
    expect(w->value.rank() == 2, "affine_map: weight must be [out,in]");
    expect(x->value.rank() == 1, "affine_map: input must be a vector");
    const int64_t O = w->value.dim(0), I = w->value.dim(1);
    expect(x->value.size() == I, "affine_map: input length mismatch");
    expect(b->value.size() == O, "affine_map: bias length mismatch");
    Tensor<T> y(Shape{O});
    for (int64_t o = 0; o < O; ++o) {
        double s = b->value[o];
        const T* row = w->value.data() + o * I;
        for (int64_t i = 0; i < I; ++i) s += static_cast<double>(row[i]) * x->value[i];
        y[o] = static_cast<T>(s);
    }
    const bool need = tape.recording() &&
                      (w->requires_grad || x->requires_grad || b->requires_grad);
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([w, x, b, out, O, I]() {
            if (!out->has_grad()) return;
            for (int64_t o = 0; o < O; ++o) {
                const T g = out->grad[o];
                if (g == T(0)) continue;
                if (w->requires_grad) {
                    w->ensure_grad();
                    T* row = w->grad.data() + o * I;
                    for (int64_t i = 0; i < I; ++i) row[i] += g * x->value[i];
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    const T* row = w->value.data() + o * I;
                    for (int64_t i = 0; i < I; ++i) x->grad[i] += g * row[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    b->grad[o] += g;
                }
            }
        });
    }
    return out;
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape) {
    Tensor<T> y = x->value.reshaped(shape);
    const bool need = tape.recording() && x->requires_grad;
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, out]() {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (int64_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b, double alpha) {
    expect(shape_eq(a->value.shape(), b->value.shape()), "add: shapes differ");
    Tensor<T> y(a->value.shape());
    const T al = static_cast<T>(alpha);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] + al * b->value[i];
    const bool need = tape.recording() && (a->requires_grad || b->requires_grad);
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([a, b, out, al]() {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < b->grad.size(); ++i) b->grad[i] += al * out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, double k) {
    Tensor<T> y(x->value.shape());
    const T kk = static_cast<T>(k);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = kk * x->value[i];
    const bool need = tape.recording() && x->requires_grad;
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([x, out, kk]() {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (int64_t i = 0; i < x->grad.size(); ++i) x->grad[i] += kk * out->grad[i];
        });
    }
    return out;
}

template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const std::vector<Var<T>>& xs, const std::vector<double>& coeffs) {
    expect(xs.size() == coeffs.size() && !xs.empty(), "weighted_sum: size mismatch");
    double total = 0;
    bool any_grad = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        expect(xs[i]->value.size() == 1, "weighted_sum: inputs must be scalars");
        total += coeffs[i] * static_cast<double>(xs[i]->value[0]);
        any_grad = any_grad || xs[i]->requires_grad;
    }
    Tensor<T> y(Shape{1});
    y[0] = static_cast<T>(total);
    const bool need = tape.recording() && any_grad;
    auto out = make_var(std::move(y), need);
    if (need) {
        tape.push([xs, coeffs, out]() {
            if (!out->has_grad()) return;
            for (size_t i = 0; i < xs.size(); ++i) {
                if (!xs[i]->requires_grad) continue;
                xs[i]->ensure_grad();
                xs[i]->grad[0] += static_cast<T>(coeffs[i]) * out->grad[0];
            }
        });
    }
    return out;
}

template <typename T>
std::pair<Var<T>, Var<T>> masked_seg_loss(Tape<T>& tape, const Var<T>& logits,
                                          const Tensor<uint8_t>& labels, int class_count,
                                          double smooth) {
    expect(logits->value.rank() == 5, "masked_seg_loss: logits must be [B,C,D,H,W]");
    const Shape& s = logits->value.shape();
    const int64_t B = s[0], Cmax = s[1], V = s[2] * s[3] * s[4];
    if (class_count < 2) throw ArgumentError("masked_seg_loss: class_count must be >= 2");
    if (class_count > Cmax) throw ArgumentError("masked_seg_loss: class_count exceeds logit channels");
    expect(labels.rank() == 4 && labels.dim(0) == B && labels.dim(1) == s[2] &&
               labels.dim(2) == s[3] && labels.dim(3) == s[4],
           "masked_seg_loss: label shape mismatch");
    for (int64_t i = 0; i < labels.size(); ++i)
        if (labels[i] >= class_count)
            throw DataError("masked_seg_loss: label value " + std::to_string(int(labels[i])) +
                            " >= class_count " + std::to_string(class_count));

    const int K = class_count;
    const int64_t total_vox = B * V;
    std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
    double ce_acc = 0;
    std::vector<double> prob(static_cast<size_t>(K));
    for (int64_t bb = 0; bb < B; ++bb) {
        const T* lp = logits->value.data() + bb * Cmax * V;
        const uint8_t* yp = labels.data() + bb * V;
        for (int64_t v = 0; v < V; ++v) {
            double m = -1e300;
            for (int c = 0; c < K; ++c) m = std::max(m, static_cast<double>(lp[c * V + v]));
            double Z = 0;
            for (int c = 0; c < K; ++c) {
                const double e = std::exp(static_cast<double>(lp[c * V + v]) - m);
                prob[static_cast<size_t>(c)] = e;
                Z += e;
            }
            const int y = yp[v];
            ce_acc -= static_cast<double>(lp[y * V + v]) - m - std::log(Z);
            for (int c = 0; c < K; ++c) {
                const double p = prob[static_cast<size_t>(c)] / Z;
                psum[static_cast<size_t>(c)] += p;
                if (c == y) inter[static_cast<size_t>(c)] += p;
            }
            gsum[static_cast<size_t>(y)] += 1.0;
        }
    }
    double dice_acc = 0;
    for (int c = 1; c < K; ++c) {
        const double Sc = psum[static_cast<size_t>(c)] + gsum[static_cast<size_t>(c)];
        dice_acc += 1.0 - (2.0 * inter[static_cast<size_t>(c)] + smooth) / (Sc + smooth);
    }
    dice_acc /= static_cast<double>(K - 1);
    const double ce = ce_acc / static_cast<double>(total_vox);

    Tensor<T> dv(Shape{1});
    dv[0] = static_cast<T>(dice_acc);
    Tensor<T> cv(Shape{1});
    cv[0] = static_cast<T>(ce);
    const bool need = tape.recording() && logits->requires_grad;
    auto dice_out = make_var(std::move(dv), need);
    auto ce_out = make_var(std::move(cv), need);
    if (need) {
        auto labels_copy = std::make_shared<Tensor<uint8_t>>(labels);
        tape.push([logits, labels_copy, dice_out, ce_out, inter, psum, gsum, B, Cmax, V, K, smooth,
                   total_vox]() {
            const double gd = dice_out->has_grad() ? static_cast<double>(dice_out->grad[0]) : 0.0;
            const double gc = ce_out->has_grad() ? static_cast<double>(ce_out->grad[0]) : 0.0;
            if (gd == 0.0 && gc == 0.0) return;
            logits->ensure_grad();
            // per-class constants of the dice part
            std::vector<double> dI(static_cast<size_t>(K), 0.0), dP(static_cast<size_t>(K), 0.0);
            for (int c = 1; c < K; ++c) {
                const double Sc = psum[static_cast<size_t>(c)] + gsum[static_cast<size_t>(c)] + smooth;
                dI[static_cast<size_t>(c)] = -2.0 / Sc / static_cast<double>(K - 1);
                dP[static_cast<size_t>(c)] =
                    (2.0 * inter[static_cast<size_t>(c)] + smooth) / (Sc * Sc) /
                    static_cast<double>(K - 1);
            }
            std::vector<double> prob(static_cast<size_t>(K)), a(static_cast<size_t>(K));
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* lp = logits->value.data() + bb * Cmax * V;
                T* gp = logits->grad.data() + bb * Cmax * V;
                const uint8_t* yp = labels_copy->data() + bb * V;
                for (int64_t v = 0; v < V; ++v) {
                    double m = -1e300;
                    for (int c = 0; c < K; ++c) m = std::max(m, static_cast<double>(lp[c * V + v]));
                    double Z = 0;
                    for (int c = 0; c < K; ++c) {
                        const double e = std::exp(static_cast<double>(lp[c * V + v]) - m);
                        prob[static_cast<size_t>(c)] = e;
                        Z += e;
                    }
                    for (int c = 0; c < K; ++c) prob[static_cast<size_t>(c)] /= Z;
                    const int y = yp[v];
                    double dot = 0;
                    for (int c = 0; c < K; ++c) {
                        const double ac = (c >= 1) ? (dI[static_cast<size_t>(c)] * (c == y ? 1.0 : 0.0) +
                                                      dP[static_cast<size_t>(c)])
                                                   : 0.0;
                        a[static_cast<size_t>(c)] = ac;
                        dot += ac * prob[static_cast<size_t>(c)];
                    }
                    for (int c = 0; c < K; ++c) {
                        const double p = prob[static_cast<size_t>(c)];
                        double g = gd * p * (a[static_cast<size_t>(c)] - dot);
                        g += gc * (p - (c == y ? 1.0 : 0.0)) / static_cast<double>(total_vox);
                        gp[c * V + v] += static_cast<T>(g);
                    }
                }
            }
        });
    }
    return {dice_out, ce_out};
}

#define PSEG_INSTANTIATE_OPS(T)                                                                      \
    template Var<T> conv3d<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, ConvGeom);     \
    template Var<T> conv_transpose3d<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,      \
                                        Stride3, bool);                                             \
    template Var<T> instance_norm<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,         \
                                     double);                                                       \
    template Var<T> leaky_relu<T>(Tape<T>&, const Var<T>&, double);                                 \
    template Var<T> interp_linear<T>(Tape<T>&, const Var<T>&, Dims3);                               \
    template Var<T> concat_channels<T>(Tape<T>&, const Var<T>&, const Var<T>&);                     \
    template Var<T> concat_prompt<T>(Tape<T>&, const Var<T>&, const Var<T>&);                       \
    template Var<T> select_channel<T>(Tape<T>&, const Var<T>&, int64_t);                            \
    template Var<T> add_broadcast_prior<T>(Tape<T>&, const Var<T>&, const Var<T>&);                 \
    template Var<T> affine_map<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);           \
    template Var<T> reshape<T>(Tape<T>&, const Var<T>&, Shape);                                     \
    template Var<T> add<T>(Tape<T>&, const Var<T>&, const Var<T>&, double);                         \
    template Var<T> scale<T>(Tape<T>&, const Var<T>&, double);                                      \
    template Var<T> weighted_sum<T>(Tape<T>&, const std::vector<Var<T>>&,                           \
                                    const std::vector<double>&);                                    \
    template std::pair<Var<T>, Var<T>> masked_seg_loss<T>(Tape<T>&, const Var<T>&,                  \
                                                          const Tensor<uint8_t>&, int, double);

PSEG_INSTANTIATE_OPS(float)
PSEG_INSTANTIATE_OPS(double)

}  // namespace pseg::ops
