#ifndef MULTIREP_H
#define MULTIREP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrNorm {
  MR_NORM_L1 = 0,
  MR_NORM_L2 = 1,
  MR_NORM_LINF = 2,
} MrNorm;

typedef enum MrStatus {
  MR_STATUS_OK = 0,
  MR_STATUS_NULL_POINTER = 1,
  MR_STATUS_INVALID_ARGUMENT = 2,
  MR_STATUS_SHAPE_MISMATCH = 3,
  MR_STATUS_IO = 4,
  MR_STATUS_FORMAT = 5,
  MR_STATUS_PANIC = 6,
} MrStatus;

typedef struct MrClassifier MrClassifier;

typedef struct MrGame MrGame;

typedef struct MrSpace MrSpace;

/**
 * Outcome of the minimax-guarantee check on one matrix game.
 */
typedef struct MrMinimaxCheck {
  double minimax;
  double achieved;
  double margin;
  double eta;
  size_t steps;
  bool pass;
} MrMinimaxCheck;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next `mr_*` call on this thread.
 */
const char *mr_last_error(void);

/**
 * The desk CNN for 28×28×1 inputs and 10 classes, He-initialized from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MrStatus mr_classifier_desk(uint64_t seed, struct MrClassifier **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum MrStatus mr_classifier_load(const char *path, struct MrClassifier **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MrStatus mr_classifier_save(const struct MrClassifier *model, const char *path);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mr_classifier_param_count(const struct MrClassifier *model);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mr_classifier_num_classes(const struct MrClassifier *model);

/**
 * Writes `n × classes` logits to `scores`.
 *
 * # Safety
 * `images` must hold `n·28·28·1` (generally `n·H·W·C`) doubles and `scores`
 * room for `n·classes`.
 */
enum MrStatus mr_classifier_scores(const struct MrClassifier *model,
                                   const double *images,
                                   size_t n,
                                   double *scores);

/**
 * Writes the argmax class of each image to `labels`.
 *
 * # Safety
 * As [`mr_classifier_scores`], with `labels` holding `n` entries.
 */
enum MrStatus mr_classifier_predict(const struct MrClassifier *model,
                                    const double *images,
                                    size_t n,
                                    size_t *labels);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mr_classifier_free(struct MrClassifier *model);

/**
 * # Safety
 * `out` must be a valid handle slot.
 */
enum MrStatus mr_space_pixel(struct MrSpace **out);

/**
 * Orthonormal 2-D DCT over each channel of `height × width × channels` images.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum MrStatus mr_space_dct(size_t height, size_t width, size_t channels, struct MrSpace **out);

/**
 * Maps `n` NHWC images into the space's coefficients.
 *
 * # Safety
 * `input` and `output` must each hold `n·h·w·c` doubles.
 */
enum MrStatus mr_space_forward(const struct MrSpace *space,
                               size_t n,
                               size_t h,
                               size_t w,
                               size_t c,
                               const double *input,
                               double *output);

/**
 * Inverse of [`mr_space_forward`].
 *
 * # Safety
 * As [`mr_space_forward`].
 */
enum MrStatus mr_space_inverse(const struct MrSpace *space,
                               size_t n,
                               size_t h,
                               size_t w,
                               size_t c,
                               const double *input,
                               double *output);

/**
 * # Safety
 * `space` must be null or a handle not yet freed.
 */
void mr_space_free(struct MrSpace *space);

/**
 * Attacks `n` labelled images within the `norm` ball of radius `epsilon` in
 * `space`, with `steps` ascent steps (step size `2.5ε/steps`) and
 * `restarts` restarts, and writes the adversarial images to `out`.
 *
 * # Safety
 * `images` and `out` must hold `n·H·W·C` doubles, `labels` `n` entries.
 */
enum MrStatus mr_attack(const struct MrClassifier *model,
                        const struct MrSpace *space,
                        enum MrNorm norm,
                        double epsilon,
                        size_t steps,
                        size_t restarts,
                        uint64_t seed,
                        const double *images,
                        const size_t *labels,
                        size_t n,
                        double *out);

/**
 * A `rows × cols` game from row-major `losses` in `[0, bound]`.
 *
 * # Safety
 * `losses` must hold `rows·cols` doubles; `out` must be a valid handle slot.
 */
enum MrStatus mr_game_new(size_t rows,
                          size_t cols,
                          const double *losses,
                          double bound,
                          struct MrGame **out);

/**
 * A game with entries uniform in `[0, 1]`.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum MrStatus mr_game_random(size_t rows, size_t cols, uint64_t seed, struct MrGame **out);

/**
 * `min_θ max_i L_i(θ)`, or NaN for a null handle.
 *
 * # Safety
 * `game` must be null or a live handle.
 */
double mr_game_pure_minimax(const struct MrGame *game);

/**
 * Runs multiplicative weights on the game with the schedule for accuracy
 * `eps`, against an oracle that wastes `delta` of slack, and checks the
 * minimax guarantee.
 *
 * # Safety
 * `game` must be a live handle and `out` writable.
 */
enum MrStatus mr_game_verify_minimax(const struct MrGame *game,
                                     double eps,
                                     double delta,
                                     struct MrMinimaxCheck *out);

/**
 * # Safety
 * `game` must be null or a handle not yet freed.
 */
void mr_game_free(struct MrGame *game);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIREP_H */
