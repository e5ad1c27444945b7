APP_NAME = "SurvLaplace"
APP_VERSION = "0.1.0"
