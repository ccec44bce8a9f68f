#pragma once

#include <span>
#include <vector>

#include "cellattn/common.hpp"

namespace cellattn {

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;  // two-sided
};

// Two-sample t-test assuming unequal variances (Welch-Satterthwaite df).
// Both samples need n >= 2. Two zero-variance samples with equal means give
// p = 1 by convention; any other zero-variance input is an error.
WelchResult welch_ttest(std::span<const double> a, std::span<const double> b);

// significant iff p < alpha / m
std::vector<bool> bonferroni_gate(const std::vector<double>& p_values, double alpha, int m);

// (x - mean) / sd with the sample (n-1) standard deviation.
std::vector<double> standardize(std::span<const double> values);

double pearson(std::span<const double> a, std::span<const double> b);
// Pearson of fractional ranks, ties averaged.
double spearman(std::span<const double> a, std::span<const double> b);

// Regularized incomplete beta I_x(a,b) by continued fraction, |err| <= ~1e-10.
double regularized_incomplete_beta(double a, double b, double x);
// P(T <= t) for Student's t with df degrees of freedom.
double student_t_cdf(double t, double df);

}  // namespace cellattn
