/* Minimal C client: walk a 3-state cliff and print the reward. */
#include <stdio.h>
#include "backstep.h"

int main(void) {
    BsEnv *env = NULL;
    if (bs_env_new("{\"env\":\"blind_cliff_walk\",\"n_states\":3,\"correct_action_scheme\":\"all_zero\"}", &env) != BS_OK) {
        fprintf(stderr, "%s\n", bs_last_error());
        return 1;
    }
    double reward = 0.0, total = 0.0;
    bool done = false;
    while (!done) {
        if (bs_env_step(env, 0, &reward, &done) != BS_OK) {
            fprintf(stderr, "%s\n", bs_last_error());
            bs_env_free(env);
            return 1;
        }
        total += reward;
    }
    bs_env_free(env);
    printf("return %.1f\n", total);
    return total == 1.0 ? 0 : 2;
}
