try:
    from pydantic_settings import BaseSettings, SettingsConfigDict
except ImportError:
    from pydantic import BaseSettings
    SettingsConfigDict = None
from typing import Optional
from dotenv import load_dotenv

load_dotenv()


class Settings(BaseSettings):
    # Artifact root override; the run config's artifact_dir is resolved below it
    CVAE_ARTIFACT_ROOT: Optional[str] = None

    # Logging
    CVAE_LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(levelname)s - %(message)s"

    # Project
    PROJECT_NAME: str = "Conditioned VAE Recommender"
    CHECKPOINT_FORMAT_VERSION: int = 1

    if SettingsConfigDict is not None:
        model_config = SettingsConfigDict(env_file=".env", extra="ignore")
    else:
        class Config:
            env_file = ".env"


settings = Settings()
