#include "mvfuse.h"
#include <stdio.h>

int main(void) {
    MvfMesh *mesh = NULL;
    MvfMapSet *maps = NULL;
    MvfPointCloud *cloud = NULL;
    MvfFusionConfig cfg = mvf_fusion_config_default();
    double d = 0.0;

    if (mvf_mesh_icosphere(0.8, 3, &mesh) != MVF_STATUS_OK) return 1;
    if (mvf_render(mesh, 48, 48, &maps) != MVF_STATUS_OK) return 1;
    if (mvf_fuse(maps, &cfg, NULL, &cloud) != MVF_STATUS_OK) {
        fprintf(stderr, "%s\n", mvf_last_error_message());
        return 1;
    }
    if (mvf_mean_surface_distance(cloud, mesh, &d) != MVF_STATUS_OK) return 1;
    printf("%s %zu %.6f\n", mvf_version(), mvf_cloud_len(cloud), d);
    mvf_cloud_free(cloud);
    mvf_mapset_free(maps);
    mvf_mesh_free(mesh);
    return d < 0.01 ? 0 : 1;
}
