#ifndef SHAPECORR_H
#define SHAPECORR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Values 2 to 8 match the command-line exit codes.
 */
typedef enum ShapecorrStatus {
  SHAPECORR_STATUS_OK = 0,
  SHAPECORR_STATUS_NULL_POINTER = 1,
  SHAPECORR_STATUS_PARSE = 2,
  SHAPECORR_STATUS_GEOMETRY = 3,
  SHAPECORR_STATUS_INVALID_ARGUMENT = 4,
  SHAPECORR_STATUS_NUMERICAL = 5,
  SHAPECORR_STATUS_NON_FINITE = 6,
  SHAPECORR_STATUS_CACHE = 7,
  SHAPECORR_STATUS_IO = 8,
  SHAPECORR_STATUS_PANIC = 9,
} ShapecorrStatus;

typedef struct ShapecorrBasis ShapecorrBasis;

typedef struct ShapecorrGeodesics ShapecorrGeodesics;

typedef struct ShapecorrMesh ShapecorrMesh;

typedef struct ShapecorrPointMap ShapecorrPointMap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null. Valid until the
 next call into the library from the same thread.
 */
const char *shapecorr_last_error(void);

/*
 Library version as a static string.
 */
const char *shapecorr_version(void);

/*
 Loads an OFF or OBJ file (chosen by extension).
 */
enum ShapecorrStatus shapecorr_mesh_load(const char *path, struct ShapecorrMesh **out);

/*
 Builds a mesh from `3 * vertex_count` coordinates and `3 * face_count`
 zero-based vertex indices.
 */
enum ShapecorrStatus shapecorr_mesh_from_arrays(const double *vertices,
                                                size_t vertex_count,
                                                const uint32_t *faces,
                                                size_t face_count,
                                                struct ShapecorrMesh **out);

size_t shapecorr_mesh_vertex_count(const struct ShapecorrMesh *mesh);

double shapecorr_mesh_area(const struct ShapecorrMesh *mesh);

void shapecorr_mesh_free(struct ShapecorrMesh *mesh);

/*
 First `k` Laplace-Beltrami eigenpairs.
 */
enum ShapecorrStatus shapecorr_basis_compute(const struct ShapecorrMesh *mesh,
                                             size_t k,
                                             struct ShapecorrBasis **out);

size_t shapecorr_basis_k(const struct ShapecorrBasis *basis);

/*
 Copies the `k` eigenvalues in ascending order.
 */
enum ShapecorrStatus shapecorr_basis_eigenvalues(const struct ShapecorrBasis *basis,
                                                 double *out,
                                                 size_t capacity);

/*
 Copies the eigenvectors column by column (`vertex_count * k` values).
 */
enum ShapecorrStatus shapecorr_basis_eigenvectors(const struct ShapecorrBasis *basis,
                                                  double *out,
                                                  size_t capacity);

void shapecorr_basis_free(struct ShapecorrBasis *basis);

/*
 All-pairs geodesic distances.
 */
enum ShapecorrStatus shapecorr_geodesics_compute(const struct ShapecorrMesh *mesh,
                                                 struct ShapecorrGeodesics **out);

enum ShapecorrStatus shapecorr_geodesics_get(const struct ShapecorrGeodesics *geodesics,
                                             size_t i,
                                             size_t j,
                                             double *out);

void shapecorr_geodesics_free(struct ShapecorrGeodesics *geodesics);

/*
 Point map from part to full shape by nearest wave kernel signatures,
 followed by spectral smoothing. Both bases must have the same size.
 */
enum ShapecorrStatus shapecorr_match_wks(const struct ShapecorrBasis *basis_full,
                                         const struct ShapecorrBasis *basis_part,
                                         size_t bins,
                                         struct ShapecorrPointMap **out);

/*
 Wraps caller-supplied targets (one full-shape vertex per part vertex).
 */
enum ShapecorrStatus shapecorr_pointmap_from_targets(const size_t *targets,
                                                     size_t len,
                                                     size_t target_count,
                                                     struct ShapecorrPointMap **out);

size_t shapecorr_pointmap_len(const struct ShapecorrPointMap *map);

enum ShapecorrStatus shapecorr_pointmap_targets(const struct ShapecorrPointMap *map,
                                                size_t *out,
                                                size_t capacity);

void shapecorr_pointmap_free(struct ShapecorrPointMap *map);

/*
 Mean geodesic error of `pred` against `truth`, normalized by the square
 root of `full_area`.
 */
enum ShapecorrStatus shapecorr_eval_mean_error(const struct ShapecorrPointMap *pred,
                                               const struct ShapecorrPointMap *truth,
                                               const struct ShapecorrGeodesics *geodesics_full,
                                               double full_area,
                                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHAPECORR_H */
