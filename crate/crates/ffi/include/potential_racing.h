#ifndef POTENTIAL_RACING_H
#define POTENTIAL_RACING_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PrStatus {
  PR_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PR_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PR_STATUS_INVALID_UTF8 = 2,
  /**
   * Rejected input: bad configuration, data or dimensions.
   */
  PR_STATUS_INVALID_INPUT = 3,
  /**
   * The computation failed (I/O, numerical breakdown).
   */
  PR_STATUS_RUNTIME = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  PR_STATUS_PANIC = 5,
} PrStatus;

/**
 * A trained network.
 */
typedef struct PrModel PrModel;

/**
 * Track, raceline, vehicle and MPC settings.
 */
typedef struct PrWorld PrWorld;

/**
 * One car's state: Frenet position, heading error, body-frame velocities
 * and yaw rate.
 */
typedef struct PrCarState {
  double p_x;
  double p_y;
  double phi;
  double v_x;
  double v_y;
  double omega;
} PrCarState;

/**
 * Throttle and steering angle.
 */
typedef struct PrControl {
  double d;
  double delta;
} PrControl;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * successful call. Valid until the next call on the same thread.
 */
const char *pr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pr_version(void);

/**
 * Number of policy parameters per car: q, zeta, s1, s2, s3.
 */
uintptr_t pr_theta_dim(void);

/**
 * The bundled circuit with the default car.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum PrStatus pr_world_new_bundled(struct PrWorld **out);

/**
 * A world from an `x,y,w` track CSV and a vehicle parameter JSON, with
 * default MPC and profile settings at friction `mu`.
 *
 * # Safety
 * The paths must be NUL-terminated strings and `out` valid for writing
 * one pointer.
 */
enum PrStatus pr_world_load(const char *track_csv,
                            bool closed,
                            const char *vehicle_json,
                            double mu,
                            struct PrWorld **out);

/**
 * Releases a world; null is ignored.
 *
 * # Safety
 * `world` must be null or a pointer returned by this library that has not
 * been freed.
 */
void pr_world_free(struct PrWorld *world);

/**
 * Centerline length in metres (0 for a null world).
 *
 * # Safety
 * `world` must be null or a live world handle.
 */
double pr_world_track_length(const struct PrWorld *world);

/**
 * One simulation step of a single car at the world's time step.
 *
 * # Safety
 * All pointers must be valid; `world` must be a live handle.
 */
enum PrStatus pr_world_step(const struct PrWorld *world,
                            const struct PrCarState *state,
                            const struct PrControl *control,
                            struct PrCarState *out);

/**
 * Control chosen by the racing policy with parameters `theta`
 * (`pr_theta_dim()` values) for car `ego` of the joint state `states`.
 *
 * # Safety
 * `states` must hold `n_cars` states, `theta` `pr_theta_dim()` values and
 * `out` must be writable; `world` must be a live handle.
 */
enum PrStatus pr_policy_act(const struct PrWorld *world,
                            const struct PrCarState *states,
                            uintptr_t n_cars,
                            uintptr_t ego,
                            const double *theta,
                            struct PrControl *out);

/**
 * Loads a model file written by the racing tool.
 *
 * # Safety
 * `path_json` must be a NUL-terminated string and `out` valid for writing
 * one pointer.
 */
enum PrStatus pr_model_load(const char *path_json, struct PrModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a pointer returned by this library that has not
 * been freed.
 */
void pr_model_free(struct PrModel *model);

/**
 * Input width of a model (0 for a null model).
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
uintptr_t pr_model_input_dim(const struct PrModel *model);

/**
 * Output width of a model (0 for a null model).
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
uintptr_t pr_model_output_dim(const struct PrModel *model);

/**
 * Evaluates a model on one input row.
 *
 * # Safety
 * `input` must hold `n_in` values and `output` have room for `n_out`;
 * `model` must be a live handle.
 */
enum PrStatus pr_model_forward(const struct PrModel *model,
                               const double *input,
                               uintptr_t n_in,
                               double *output,
                               uintptr_t n_out);

/**
 * Joint policy parameters maximizing a trained potential at `states`,
 * written car by car into `theta_out` (`n_cars * pr_theta_dim()` values).
 * `restarts` extra random starts are drawn from `seed`.
 *
 * # Safety
 * `states` must hold `n_cars` states and `theta_out` have room for
 * `n_cars * pr_theta_dim()` values; handles must be live.
 */
enum PrStatus pr_potential_argmax(const struct PrWorld *world,
                                  const struct PrModel *potential,
                                  const struct PrCarState *states,
                                  uintptr_t n_cars,
                                  uintptr_t restarts,
                                  uint64_t seed,
                                  double *theta_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POTENTIAL_RACING_H */
