#pragma once

namespace evimerge {

// Special functions needed by the Dirichlet KL term and the harness
// statistics. All take arguments in the ranges this project produces
// (alpha >= 1, chi-square with small df); no attempt at full-domain
// coverage.

double digamma(double x);
double trigamma(double x);

// Regularized incomplete gamma functions P(a, x) and Q(a, x) = 1 - P(a, x).
double gamma_p(double a, double x);
double gamma_q(double a, double x);

// Survival probability of a chi-square statistic with `df` degrees of
// freedom, i.e. the p-value of an observed statistic.
double chi_square_survival(double statistic, int df);

}  // namespace evimerge
