#include <math.h>
#include <stdio.h>
#include <string.h>

#include "sngd.h"

#define CHECK(call)                                                              \
  do {                                                                           \
    SngdStatus s_ = (call);                                                      \
    if (s_ != SNGD_STATUS_OK) {                                                  \
      const char *m_ = sngd_last_error();                                        \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_, m_ ? m_ : "");     \
      return 1;                                                                  \
    }                                                                            \
  } while (0)

int main(void) {
  printf("sngd %s\n", sngd_version());

  /* Structured second-order run on Dixon-Price with a lower Heisenberg factor. */
  enum { P = 20 };
  SngdObjective *obj = NULL;
  CHECK(sngd_objective_dixon_price(P, &obj));
  SngdFactor *factor = NULL;
  CHECK(sngd_factor_new(SNGD_GROUP_HEIS_LOWER, P, 1, 1, 1.0, &factor));
  double mu[P];
  for (int i = 0; i < P; i++) mu[i] = 1.0;
  SngdGauss *state = NULL;
  CHECK(sngd_gauss_new(mu, P, factor, 1.0, 1.0, &state));
  sngd_factor_free(factor);

  double first = 0.0, loss = 0.0;
  CHECK(sngd_objective_eval(obj, mu, P, &first));
  for (int t = 0; t < 60; t++) CHECK(sngd_gauss_step(state, obj, SNGD_GAUSS_METHOD_STRUCTURED, 0, 0));
  CHECK(sngd_gauss_mean(state, mu, P));
  CHECK(sngd_objective_eval(obj, mu, P, &loss));
  printf("dixon-price: %.3e -> %.3e\n", first, loss);
  if (!(loss < 1e-9)) return 2;

  /* Errors come back as status codes with a message. */
  SngdFactor *bad = NULL;
  SngdStatus st = sngd_factor_new(SNGD_GROUP_BLOCK_UPPER, 3, 7, 0, 1.0, &bad);
  if (st != SNGD_STATUS_INVALID_ARGUMENT || bad != NULL || sngd_last_error() == NULL) return 3;
  if (sngd_gauss_mean(state, mu, P + 1) != SNGD_STATUS_DIMENSION_MISMATCH) return 4;

  char *json = NULL;
  CHECK(sngd_gauss_to_json(state, &json));
  if (strstr(json, "\"mu\"") == NULL) return 5;
  sngd_string_free(json);

  /* Whole run from a JSON configuration. */
  const char *cfg = "{\"objective\": {\"name\": \"rosenbrock\", \"p\": 4}, \"method\": \"adam\", "
                    "\"iters\": 50, \"lr\": 0.01}";
  double losses[50];
  size_t written = 0;
  CHECK(sngd_run(cfg, 0, losses, 50, &written));
  if (written != 50 || !(losses[49] < losses[0])) return 6;
  printf("adam: %.3e -> %.3e\n", losses[0], losses[49]);

  sngd_gauss_free(state);
  sngd_objective_free(obj);
  puts("ok");
  return 0;
}
