from pydantic_settings import BaseSettings, SettingsConfigDict


# ---------------------------------------------------------------------------
# Process settings (env vars SPECTRA_SHAPE_*, optional .env file)
# ---------------------------------------------------------------------------
class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SPECTRA_SHAPE_",
        env_file=".env",
        extra="ignore",
    )

    seed:             int   = 0
    threads:          int   = 4
    log_level:        str   = "INFO"
    # hidden fault-injection knob; values below 1 put the IPG penalty under its floor
    penalty_scale:    float = 1.0
    eig_shift:        float = -1.0
    dense_limit:      int   = 3000
    cluster_tol:      float = 1e-3
    selftest_h:       float = 0.05
    boundary_samples: int   = 256


def get_settings() -> Settings:
    """Read settings fresh from the environment on every call."""
    return Settings()
