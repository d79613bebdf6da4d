#ifndef UNIFEAT_H
#define UNIFEAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum UnifeatStatus {
  UNIFEAT_STATUS_OK = 0,
  // A required pointer argument was null.
  UNIFEAT_STATUS_NULL_POINTER = 1,
  // Bad argument, configuration or string encoding.
  UNIFEAT_STATUS_INVALID_ARGUMENT = 2,
  // A file could not be read, written or decoded.
  UNIFEAT_STATUS_IO = 3,
  // Malformed feature file or checkpoint.
  UNIFEAT_STATUS_FORMAT = 4,
  // Array shapes or descriptor dimensions disagree.
  UNIFEAT_STATUS_DIMENSION = 5,
  // The extractor lacks what the request needs.
  UNIFEAT_STATUS_STATE = 6,
  // A numeric failure during computation.
  UNIFEAT_STATUS_RUNTIME = 7,
  // The caller's buffer is smaller than the result.
  UNIFEAT_STATUS_BUFFER_TOO_SMALL = 8,
  // An internal panic was caught at the boundary.
  UNIFEAT_STATUS_PANIC = 9,
} UnifeatStatus;

// Opaque extractor handle.
typedef struct UnifeatExtractor UnifeatExtractor;

// Opaque keypoint and descriptor set of one image.
typedef struct UnifeatFeatures UnifeatFeatures;

// Opaque mutual nearest-neighbour matches between two feature sets.
typedef struct UnifeatMatches UnifeatMatches;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next failing call.
const char *unifeat_last_error(void);

// Library version as a static string.
const char *unifeat_version(void);

// Creates an extractor.
//
// All string arguments may be null. `config_path` is a TOML run configuration
// (defaults otherwise); `mode` is "teacher", "ts" or "ss" and overrides the
// configuration; student modes need `checkpoint`; `backbone` overrides the
// cached backbone weights in teacher mode.
//
// # Safety
// String arguments must be null or nul-terminated; `out` must be writable.
enum UnifeatStatus unifeat_extractor_new(const char *config_path,
                                         const char *mode,
                                         const char *checkpoint,
                                         const char *backbone,
                                         struct UnifeatExtractor **out);

// Releases an extractor; null is ignored.
//
// # Safety
// `ex` must come from [`unifeat_extractor_new`] and not be used afterwards.
void unifeat_extractor_free(struct UnifeatExtractor *ex);

// Length of the local descriptors this extractor produces.
//
// # Safety
// `ex` must be a live handle and `out` writable.
enum UnifeatStatus unifeat_extractor_descriptor_dim(const struct UnifeatExtractor *ex, size_t *out);

// Keypoints and descriptors of an image file.
//
// # Safety
// `ex` must be a live handle, `path` nul-terminated and `out` writable.
enum UnifeatStatus unifeat_extract_file(const struct UnifeatExtractor *ex,
                                        const char *path,
                                        struct UnifeatFeatures **out);

// Keypoints and descriptors of an interleaved 8-bit RGB buffer of `3·width·height` bytes.
//
// # Safety
// `rgb` must point to `len` readable bytes; `ex` must be live and `out` writable.
enum UnifeatStatus unifeat_extract_rgb(const struct UnifeatExtractor *ex,
                                       const uint8_t *rgb,
                                       size_t len,
                                       uint32_t width,
                                       uint32_t height,
                                       struct UnifeatFeatures **out);

// Unit-norm global descriptor of an image file.
//
// `dim` always receives the descriptor length; when it exceeds `capacity` the
// call returns `BufferTooSmall` and `buf` is left untouched. `buf` may be null
// when `capacity` is 0.
//
// # Safety
// `buf` must hold `capacity` floats; `ex` must be live; `path` nul-terminated.
enum UnifeatStatus unifeat_global_file(const struct UnifeatExtractor *ex,
                                       const char *path,
                                       float *buf,
                                       size_t capacity,
                                       size_t *dim);

// Reads a feature file written by `unifeat extract` or [`unifeat_features_write`].
//
// # Safety
// `path` must be nul-terminated and `out` writable.
enum UnifeatStatus unifeat_features_read(const char *path, struct UnifeatFeatures **out);

// # Safety
// `f` must be a live handle and `path` nul-terminated.
enum UnifeatStatus unifeat_features_write(const struct UnifeatFeatures *f, const char *path);

// Number of keypoints; 0 for null.
//
// # Safety
// `f` must be null or a live handle.
size_t unifeat_features_count(const struct UnifeatFeatures *f);

// Descriptor length; 0 for null.
//
// # Safety
// `f` must be null or a live handle.
size_t unifeat_features_dim(const struct UnifeatFeatures *f);

// Row-major `count×4` keypoints `(x, y, score, group_id)`; null for null or empty sets.
//
// # Safety
// `f` must be null or a live handle.
const float *unifeat_features_keypoints(const struct UnifeatFeatures *f);

// Row-major `count×dim` unit-norm descriptors; null for null or empty sets.
//
// # Safety
// `f` must be null or a live handle.
const float *unifeat_features_descriptors(const struct UnifeatFeatures *f);

// Releases a feature set; null is ignored.
//
// # Safety
// `f` must come from this library and not be used afterwards.
void unifeat_features_free(struct UnifeatFeatures *f);

// Mutual nearest-neighbour matches by descriptor inner product.
//
// # Safety
// `a` and `b` must be live handles and `out` writable.
enum UnifeatStatus unifeat_match(const struct UnifeatFeatures *a,
                                 const struct UnifeatFeatures *b,
                                 struct UnifeatMatches **out);

// Number of matches; 0 for null.
//
// # Safety
// `m` must be null or a live handle.
size_t unifeat_matches_count(const struct UnifeatMatches *m);

// Interleaved `count×2` keypoint indices `(a, b)`; null for null or empty sets.
//
// # Safety
// `m` must be null or a live handle.
const uint32_t *unifeat_matches_pairs(const struct UnifeatMatches *m);

// Descriptor similarity of each match; null for null or empty sets.
//
// # Safety
// `m` must be null or a live handle.
const float *unifeat_matches_similarities(const struct UnifeatMatches *m);

// Releases a match set; null is ignored.
//
// # Safety
// `m` must come from [`unifeat_match`] and not be used afterwards.
void unifeat_matches_free(struct UnifeatMatches *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIFEAT_H */
