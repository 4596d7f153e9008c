#ifndef MAMBATRACK_H
#define MAMBATRACK_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtStatus {
  MT_STATUS_OK = 0,
  /**
   * Bad shape, value or config.
   */
  MT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Non-finite value or failed numerical check.
   */
  MT_STATUS_NUMERIC = 2,
  /**
   * File missing, unreadable or malformed.
   */
  MT_STATUS_IO = 3,
  MT_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  MT_STATUS_PANIC = 5,
} MtStatus;

/**
 * A restored checkpoint plus, once initialised, a running track.
 */
typedef struct MtTracker MtTracker;

typedef struct MtEvent {
  uint16_t x;
  uint16_t y;
  /**
   * Microseconds, non-decreasing across the array.
   */
  int64_t t;
  /**
   * +1 or -1.
   */
  int8_t p;
} MtEvent;

/**
 * Center, width and height in pixels.
 */
typedef struct MtBox {
  double cx;
  double cy;
  double w;
  double h;
} MtBox;

/**
 * Percentages in `[0, 100]`.
 */
typedef struct MtMetrics {
  double sr;
  double pr;
  double npr;
} MtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *mt_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mt_version(void);

/**
 * Accumulates a time surface of `height × width` cells into `out_grid`
 * (row-major, `height·width` doubles) and writes the event density.
 *
 * # Safety
 * `events` must hold `n_events` items; `out_grid` must hold `height·width`
 * doubles; `out_density` must be writable.
 */
enum MtStatus mt_voxelize(const struct MtEvent *events,
                          size_t n_events,
                          uint32_t height,
                          uint32_t width,
                          int64_t t_ref,
                          int64_t delta_t,
                          double *out_grid,
                          double *out_density);

/**
 * SR, PR and NPR of `n` predicted boxes against ground truth. SR is the
 * area under the success curve, or the fraction at IoU 0.5 when `sr_t50`.
 *
 * # Safety
 * `preds` and `gts` must hold `n` boxes; `out` must be writable.
 */
enum MtStatus mt_evaluate(const struct MtBox *preds,
                          const struct MtBox *gts,
                          size_t n,
                          bool sr_t50,
                          struct MtMetrics *out);

/**
 * Loads an `MTCK` checkpoint into a new tracker handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtStatus mt_tracker_load(const char *path, struct MtTracker **out);

/**
 * Releases a tracker. Null is ignored.
 *
 * # Safety
 * `tracker` must come from [`mt_tracker_load`] and not be used afterwards.
 */
void mt_tracker_free(struct MtTracker *tracker);

/**
 * Starts a track on the first frame. `rgb` is interleaved `[h][w][3]`,
 * `surface` is `[h][w]` (see [`mt_voxelize`]). Restarts any running track.
 *
 * # Safety
 * `tracker` must be a live handle; buffers as in the frame layout above.
 */
enum MtStatus mt_tracker_init(struct MtTracker *tracker,
                              const double *rgb,
                              const double *surface,
                              uint32_t height,
                              uint32_t width,
                              struct MtBox init);

/**
 * Tracks one more frame and writes the predicted box.
 *
 * # Safety
 * As for [`mt_tracker_init`]; `out` must be writable.
 */
enum MtStatus mt_tracker_step(struct MtTracker *tracker,
                              const double *rgb,
                              const double *surface,
                              uint32_t height,
                              uint32_t width,
                              double density,
                              struct MtBox *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAMBATRACK_H */
