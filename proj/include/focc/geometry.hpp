#pragma once

#include <cmath>

#include "focc/common.hpp"

namespace focc {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3 &o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3 &o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3 &o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

struct Mat3 {
    // row-major
    double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }
    static Mat3 rot_z(double a) {
        Mat3 r;
        double c = std::cos(a), s = std::sin(a);
        r.m[0] = c; r.m[1] = -s; r.m[2] = 0;
        r.m[3] = s; r.m[4] = c;  r.m[5] = 0;
        r.m[6] = 0; r.m[7] = 0;  r.m[8] = 1;
        return r;
    }
    // columns are the images of the basis vectors
    static Mat3 from_columns(const Vec3 &c0, const Vec3 &c1, const Vec3 &c2) {
        Mat3 r;
        r.m[0] = c0.x; r.m[1] = c1.x; r.m[2] = c2.x;
        r.m[3] = c0.y; r.m[4] = c1.y; r.m[5] = c2.y;
        r.m[6] = c0.z; r.m[7] = c1.z; r.m[8] = c2.z;
        return r;
    }

    Vec3 operator*(const Vec3 &v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3 &o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = 0;
                for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
                r.m[i * 3 + j] = acc;
            }
        return r;
    }
    Mat3 transpose() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
        return r;
    }
};

// Rigid transform p' = R p + t.
struct Rigid {
    Mat3 R;
    Vec3 t;

    Vec3 apply(const Vec3 &p) const { return R * p + t; }
    Vec3 rotate(const Vec3 &v) const { return R * v; }
    Rigid compose(const Rigid &inner) const {  // this ∘ inner
        return {R * inner.R, R * inner.t + t};
    }
    Rigid inverse() const {
        Mat3 rt = R.transpose();
        return {rt, (rt * t) * -1.0};
    }
};

}  // namespace focc
