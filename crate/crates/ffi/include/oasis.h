#ifndef OASIS_H
#define OASIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum OasisStatus {
  OASIS_STATUS_OK = 0,
  OASIS_STATUS_NULL_POINTER = 1,
  OASIS_STATUS_INVALID_PARAMETER = 2,
  OASIS_STATUS_SHAPE_MISMATCH = 3,
  OASIS_STATUS_INVALID_POSE = 4,
  OASIS_STATUS_IO = 5,
  OASIS_STATUS_MALFORMED = 6,
  OASIS_STATUS_BUFFER_TOO_SMALL = 7,
  OASIS_STATUS_PANIC = 8,
} OasisStatus;

/**
 * Streaming voxel carver (template, grid and motion gate).
 */
typedef struct OasisCarver OasisCarver;

/**
 * Triangle mesh extracted from a carver.
 */
typedef struct OasisMesh OasisMesh;

/**
 * Sonar geometry. Angles in radians, ranges in metres.
 */
typedef struct OasisSonarIntrinsics {
  size_t n_beams;
  size_t n_range_bins;
  double hfov;
  double vfov;
  double min_range;
  double max_range;
} OasisSonarIntrinsics;

/**
 * Axis-aligned voxel grid: min corner, cell counts and edge length.
 */
typedef struct OasisGridSpec {
  double origin[3];
  size_t dims[3];
  double voxel_size;
} OasisGridSpec;

/**
 * World-from-sensor pose: translation plus unit quaternion (w, x, y, z).
 */
typedef struct OasisPose {
  double translation[3];
  double rotation_wxyz[4];
} OasisPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *oasis_version(void);

/**
 * Message for the last failed call on this thread, or null if none.
 * Valid until the next failing call on the same thread.
 */
const char *oasis_last_error_message(void);

/**
 * Fills `out` with the default sensor (512 beams, 398 bins, 130° x 20°, 2 m).
 */
enum OasisStatus oasis_sonar_intrinsics_default(struct OasisSonarIntrinsics *out);

/**
 * Thresholds one row-major (bin, beam) intensity frame into `out` (0 or 1 per pixel).
 * Background statistics come from the first `background_bins` rows.
 */
enum OasisStatus oasis_binarize(const struct OasisSonarIntrinsics *intrinsics,
                                const uint8_t *intensities,
                                size_t len,
                                size_t background_bins,
                                size_t half_window,
                                uint8_t *out,
                                size_t out_len);

/**
 * Grid covering the box `[min, max]` (three doubles each) at `voxel_size`.
 */
enum OasisStatus oasis_grid_spec_covering(const double *min,
                                          const double *max,
                                          double voxel_size,
                                          struct OasisGridSpec *out);

/**
 * Builds the sensor template and an empty grid. `motion_gate` is the
 * minimum translation (m) between integrated frames.
 */
enum OasisStatus oasis_carver_new(const struct OasisSonarIntrinsics *intrinsics,
                                  const struct OasisGridSpec *grid,
                                  double t_r,
                                  double motion_gate,
                                  struct OasisCarver **out);

void oasis_carver_free(struct OasisCarver *carver);

/**
 * Integrates one binary map (row-major, nonzero = lit) taken at `pose`.
 * `integrated` is set to 0 when the motion gate rejected the frame.
 */
enum OasisStatus oasis_carver_integrate(struct OasisCarver *carver,
                                        const uint8_t *map,
                                        size_t len,
                                        const struct OasisPose *pose,
                                        bool *integrated);

/**
 * Number of voxels in the carver's grid.
 */
enum OasisStatus oasis_carver_voxel_count(const struct OasisCarver *carver, size_t *out);

/**
 * Copies the occupancy flags (x fastest, then y, then z) into `out`.
 */
enum OasisStatus oasis_carver_copy_occupancy(const struct OasisCarver *carver,
                                             uint8_t *out,
                                             size_t out_len);

/**
 * Copies the observation and occupied-observation counters.
 */
enum OasisStatus oasis_carver_copy_counts(const struct OasisCarver *carver,
                                          uint16_t *g_obs,
                                          uint16_t *g_occ,
                                          size_t out_len);

/**
 * Writes the grid blob that the command-line tool reads back.
 */
enum OasisStatus oasis_carver_save_grid(const struct OasisCarver *carver, const char *path);

/**
 * Extracts the occupied surface. `smooth_iterations` = 0 skips smoothing.
 */
enum OasisStatus oasis_mesh_from_carver(const struct OasisCarver *carver,
                                        size_t smooth_iterations,
                                        double smooth_lambda,
                                        struct OasisMesh **out);

void oasis_mesh_free(struct OasisMesh *mesh);

enum OasisStatus oasis_mesh_counts(const struct OasisMesh *mesh,
                                   size_t *vertices,
                                   size_t *triangles);

/**
 * Copies vertex positions as packed xyz triples (`3 * vertices` doubles).
 */
enum OasisStatus oasis_mesh_copy_vertices(const struct OasisMesh *mesh,
                                          double *out,
                                          size_t out_len);

/**
 * Copies triangle vertex indices (`3 * triangles` values, counter-clockwise
 * seen from outside).
 */
enum OasisStatus oasis_mesh_copy_triangles(const struct OasisMesh *mesh,
                                           uint32_t *out,
                                           size_t out_len);

enum OasisStatus oasis_mesh_write_ply(const struct OasisMesh *mesh, const char *path, bool ascii);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OASIS_H */
