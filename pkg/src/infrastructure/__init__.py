# Infrastructure layer - external services and data access