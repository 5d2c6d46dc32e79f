#ifndef LFHCP_H
#define LFHCP_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LfhcpStatus {
  LFHCP_STATUS_OK = 0,
  LFHCP_STATUS_NULL_POINTER = 1,
  LFHCP_STATUS_INVALID_ARGUMENT = 2,
  LFHCP_STATUS_INVALID_INPUT = 3,
  LFHCP_STATUS_OUT_OF_RANGE = 4,
  LFHCP_STATUS_BUFFER_TOO_SMALL = 5,
  LFHCP_STATUS_INTERNAL = 6,
  LFHCP_STATUS_PANIC = 7,
} LfhcpStatus;

/**
 * Filtered critical points for one plan.
 */
typedef struct LfhcpCriticalSet LfhcpCriticalSet;

/**
 * A motion plan in its start frame.
 */
typedef struct LfhcpPlan LfhcpPlan;

/**
 * Obstacle scenarios sampled for one plan.
 */
typedef struct LfhcpScenarios LfhcpScenarios;

/**
 * Iteration counts and size of a hallucination run. Zero fields take the
 * reduced defaults.
 */
typedef struct LfhcpHallucinationOptions {
  size_t n_obstacles;
  size_t phase1_iters;
  size_t phase2_anneal_iters;
  size_t phase2_hard_iters;
  size_t n_max;
} LfhcpHallucinationOptions;

typedef struct LfhcpCriticalPoint {
  double x;
  double y;
  /**
   * 1-based timestep.
   */
  size_t t_crit;
} LfhcpCriticalPoint;

typedef struct LfhcpCircle {
  double x;
  double y;
  double radius;
} LfhcpCircle;

typedef struct LfhcpFeature {
  double r;
  double theta;
  double s;
  double psi;
} LfhcpFeature;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * NUL-terminated library version; static storage.
 */
const char *lfhcp_version(void);

/**
 * Message for the calling thread's most recent failure, empty after success.
 * Valid until the next lfhcp call on the same thread.
 */
const char *lfhcp_last_error(void);

/**
 * Builds a plan from `n` waypoints starting at the origin.
 */
enum LfhcpStatus lfhcp_plan_from_positions(const double *xs,
                                           const double *ys,
                                           size_t n,
                                           double dt,
                                           struct LfhcpPlan **out);

/**
 * Poses in the plan; 0 for a null handle.
 */
size_t lfhcp_plan_horizon(const struct LfhcpPlan *plan);

void lfhcp_plan_free(struct LfhcpPlan *plan);

/**
 * Two-phase fit followed by the greedy filter. `options` may be null.
 */
enum LfhcpStatus lfhcp_hallucinate(const struct LfhcpPlan *plan,
                                   const struct LfhcpHallucinationOptions *options,
                                   uint64_t seed,
                                   struct LfhcpCriticalSet **out);

/**
 * Wraps caller-supplied critical points as an accepted set.
 */
enum LfhcpStatus lfhcp_critical_set_new(const struct LfhcpCriticalPoint *points,
                                        size_t n,
                                        struct LfhcpCriticalSet **out);

size_t lfhcp_critical_set_len(const struct LfhcpCriticalSet *set);

/**
 * 1 when the filter accepted the plan, 0 otherwise or for a null handle.
 */
int32_t lfhcp_critical_set_accepted(const struct LfhcpCriticalSet *set);

enum LfhcpStatus lfhcp_critical_set_get(const struct LfhcpCriticalSet *set,
                                        size_t index,
                                        struct LfhcpCriticalPoint *out);

void lfhcp_critical_set_free(struct LfhcpCriticalSet *set);

/**
 * Samples up to `count` scenarios through the kept points (default speed
 * bounds and radii, no clutter).
 */
enum LfhcpStatus lfhcp_generate(const struct LfhcpPlan *plan,
                                const struct LfhcpCriticalSet *set,
                                size_t count,
                                uint64_t seed,
                                struct LfhcpScenarios **out);

size_t lfhcp_scenarios_len(const struct LfhcpScenarios *s);

size_t lfhcp_scenario_obstacles(const struct LfhcpScenarios *s, size_t scenario);

/**
 * Centre of one obstacle at 1-based timestep `t`.
 */
enum LfhcpStatus lfhcp_scenario_position(const struct LfhcpScenarios *s,
                                         size_t scenario,
                                         size_t obstacle,
                                         size_t t,
                                         double *x,
                                         double *y);

void lfhcp_scenarios_free(struct LfhcpScenarios *s);

/**
 * Ranges for `beams` beams spread over `fov` around `heading`, written to
 * `ranges`, which must hold `beams` values.
 */
enum LfhcpStatus lfhcp_raycast(double x,
                               double y,
                               double heading,
                               const struct LfhcpCircle *circles,
                               size_t n,
                               size_t beams,
                               double fov,
                               double max_range,
                               double *ranges,
                               size_t capacity);

/**
 * Coverage score in [0, 1] under the default bins. `subset_mask` bits are
 * r = 1, theta = 2, s = 4, psi = 8.
 */
enum LfhcpStatus lfhcp_dcs(const struct LfhcpFeature *samples,
                           size_t n,
                           uint8_t subset_mask,
                           double *out);

/**
 * Success percentage rounded to two decimals, written as text (e.g. "30.83%").
 */
enum LfhcpStatus lfhcp_format_success_rate(size_t successes,
                                           size_t total,
                                           char *buf,
                                           size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LFHCP_H */
