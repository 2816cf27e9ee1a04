#ifndef MORPHOGRID_H
#define MORPHOGRID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MgStatus {
  MG_STATUS_OK = 0,
  MG_STATUS_NULL_POINTER = 1,
  MG_STATUS_INVALID_ARGUMENT = 2,
  MG_STATUS_CONFIG = 3,
  MG_STATUS_DATA = 4,
  MG_STATUS_NUMERIC = 5,
  MG_STATUS_PANIC = 6,
} MgStatus;

/*
 Trained road-pattern CNN.
 */
typedef struct MgCnn MgCnn;

/*
 Gradient-boosted regression model.
 */
typedef struct MgGbm MgGbm;

/*
 Road graph built from an OSM XML or GeoJSON document.
 */
typedef struct MgGraph MgGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *mg_version(void);

/*
 Copies the calling thread's last error message into `buf` (truncated,
 always NUL-terminated when `cap > 0`). Returns the full message length
 excluding the terminator; 0 when there is no error.

 # Safety
 `buf` must be valid for `cap` bytes or null.
 */
size_t mg_last_error(char *buf, size_t cap);

/*
 Parses a document and builds its road graph.

 # Safety
 `data` must be valid for `len` bytes; `out` must be a valid pointer.
 */
enum MgStatus mg_graph_from_document(const uint8_t *data, size_t len, struct MgGraph **out);

/*
 # Safety
 `graph` must come from [`mg_graph_from_document`] or be null.
 */
void mg_graph_free(struct MgGraph *graph);

/*
 Node count, edge count, intersection count (degree ≥ 3) and total
 length in meters.

 # Safety
 `graph` must be a live handle; output pointers may be null.
 */
enum MgStatus mg_graph_stats(const struct MgGraph *graph,
                             size_t *nodes,
                             size_t *edges,
                             size_t *intersections,
                             double *length_m);

/*
 Heuristic category probabilities (gridiron, organic, radial, no
 pattern) for a graph covering a square of side `extent_m`.

 # Safety
 `graph` must be a live handle; `probs` must hold 4 doubles.
 */
enum MgStatus mg_classify_heuristic(const struct MgGraph *graph, double extent_m, double *probs);

/*
 Loads an `MGRD01` checkpoint.

 # Safety
 `data` must be valid for `len` bytes; `out` must be a valid pointer.
 */
enum MgStatus mg_cnn_load(const uint8_t *data, size_t len, struct MgCnn **out);

/*
 # Safety
 `model` must come from [`mg_cnn_load`] or be null.
 */
void mg_cnn_free(struct MgCnn *model);

/*
 Renders a `size_px` diagram of `graph` around (`lon`, `lat`) with the
 default palette and classifies it.

 # Safety
 Handles must be live; `probs` must hold 4 doubles.
 */
enum MgStatus mg_cnn_classify(const struct MgCnn *model,
                              const struct MgGraph *graph,
                              double lon,
                              double lat,
                              double radius_m,
                              uint32_t size_px,
                              double *probs);

/*
 Loads an `MGBM01` text checkpoint.

 # Safety
 `text` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MgStatus mg_gbm_load(const char *text, struct MgGbm **out);

/*
 # Safety
 `model` must come from [`mg_gbm_load`] or be null.
 */
void mg_gbm_free(struct MgGbm *model);

/*
 Number of features the model expects per row.

 # Safety
 `model` must be a live handle.
 */
size_t mg_gbm_n_features(const struct MgGbm *model);

/*
 Predicts `n_rows` row-major rows of `n_features` values into `out`.

 # Safety
 `rows` must hold `n_rows * n_features` doubles and `out` `n_rows`.
 */
enum MgStatus mg_gbm_predict(const struct MgGbm *model,
                             const double *rows,
                             size_t n_rows,
                             size_t n_features,
                             double *out);

/*
 Shannon entropy (natural log) of the land-use area shares.

 # Safety
 `areas` must hold `n` doubles; `out` must be valid.
 */
enum MgStatus mg_land_use_mixture(const double *areas, size_t n, double *out);

/*
 Vitality scores from `n` rows of 5 z-scores (poi, tweets, ntl,
 population, airbnb); `include` holds 5 flags (non-zero = included).

 # Safety
 `z` must hold `5 * n` doubles, `include` 5 bytes and `out` `n` doubles.
 */
enum MgStatus mg_vitality_score(const double *z, size_t n, const uint8_t *include, double *out);

/*
 Runs the whole pipeline for a configuration file.

 # Safety
 `config_path` must be a NUL-terminated string.
 */
enum MgStatus mg_run(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MORPHOGRID_H */
