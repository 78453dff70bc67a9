#include <stdio.h>
#include <stdlib.h>

#include "lamm.h"

int main(int argc, char **argv) {
  LammModel *model = NULL;
  if (argc < 2 || lamm_model_load(argv[1], &model) != LAMM_STATUS_OK) {
    fprintf(stderr, "load failed: %s\n", lamm_last_error());
    return 1;
  }
  size_t nv = lamm_model_num_vertices(model);
  size_t d = lamm_model_latent_size(model);
  size_t nc = lamm_model_num_controls(model);
  float *z = calloc(d, sizeof(float));
  float *deltas = calloc(3 * nc, sizeof(float));
  float *out = calloc(3 * nv, sizeof(float));
  deltas[0] = 0.01f;
  LammStatus s = lamm_decode(model, z, d, deltas, 3 * nc, out, 3 * nv);
  if (s == LAMM_STATUS_OK) {
    s = lamm_encode(model, out, 3 * nv, z, d);
  }
  LammStatus bad = lamm_decode(model, z, d + 1, NULL, 0, out, 3 * nv);
  printf("%zu %zu %zu %d %d\n", nv, d, nc, (int)s, (int)bad);
  free(z);
  free(deltas);
  free(out);
  lamm_model_free(model);
  return s == LAMM_STATUS_OK && bad == LAMM_STATUS_SHAPE_MISMATCH ? 0 : 1;
}
